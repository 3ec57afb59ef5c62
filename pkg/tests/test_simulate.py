import numpy as np
import pandas as pd
import pytest

import ipcsem
from ipcsem import SimCondition, SimStudyConfig, full_study, population_moments
from ipcsem import simulate as sim


def oracle_sigma(loadings, rho):
    lam = np.zeros((4, 2))
    lam[0, 0], lam[1, 0] = loadings[0], loadings[1]
    lam[2, 1], lam[3, 1] = loadings[2], loadings[3]
    phi = np.array([[1.0, rho], [rho, 1.0]])
    return lam @ phi @ lam.T + 0.8 * np.eye(4)


class TestPopulationMoments:
    def test_group1_values(self):
        cond = SimCondition(0.2, 0.0, 125, 1, 1)
        mu, sigma = population_moments(cond, 1)
        assert np.allclose(mu, 1.0)
        assert sigma[0, 0] == pytest.approx(1.8)
        assert sigma[0, 1] == pytest.approx(1.0)
        assert sigma[0, 2] == pytest.approx(0.25)
        assert np.allclose(sigma, oracle_sigma([1, 1, 0.5, 1], 0.5), atol=1e-14)

    def test_group2_loading_shift(self):
        cond = SimCondition(0.0, 0.2, 125, 1, 1)
        mu, sigma = population_moments(cond, 2)
        assert np.allclose(mu, 2.0)
        assert sigma[0, 0] == pytest.approx(1.2**2 + 0.8)  # 2.24
        assert np.allclose(sigma, oracle_sigma([1.2, 1, 0.5, 1], 0.5), atol=1e-14)

    def test_null_condition_groups_differ_only_in_means(self):
        cond = SimCondition(0.0, 0.0, 125, 1, 1)
        mu1, s1 = population_moments(cond, 1)
        mu2, s2 = population_moments(cond, 2)
        assert np.allclose(s1, s2)
        assert np.allclose(mu2 - mu1, 1.0)

    def test_invalid_correlation_rejected(self):
        with pytest.raises(ValueError):
            SimCondition(0.6, 0.0, 125, 1, 1)
        cond = SimCondition(0.4, 0.0, 125, 1, 1)
        with pytest.raises(ValueError):
            population_moments(cond, 3)

    def test_condition_validation(self):
        with pytest.raises(ValueError):
            SimCondition(0.0, 0.0, 10, 1, 1)
        with pytest.raises(ValueError):
            SimCondition(0.0, 0.0, 125, 0, 1)


class TestReplication:
    def test_deterministic_given_seed(self):
        cond = SimCondition(0.2, 0.0, 125, 2, 99)
        first = sim.run_replication(cond, 0)
        second = sim.run_replication(cond, 0)
        assert first == second

    def test_different_reps_different_data(self):
        cond = SimCondition(0.2, 0.0, 125, 2, 99)
        a = sim.simulate_dataset(cond, 0)
        b = sim.simulate_dataset(cond, 1)
        assert not np.allclose(a["y1"], b["y1"])

    def test_record_fields(self):
        cond = SimCondition(0.2, 0.0, 125, 1, 7)
        records = sim.run_replication(cond, 0)
        assert {r["method"] for r in records} == set(sim.ALL_METHODS)
        for rec in records:
            assert rec["converged"]
            assert np.isfinite(rec["estimate"])
            assert isinstance(rec["reject"], bool)
            assert isinstance(rec["covered"], bool)

    def test_group_relabel_flips_ipc_sign(self):
        cond = SimCondition(0.2, 0.0, 250, 1, 31)
        data = sim.simulate_dataset(cond, 0)
        est, se = sim._run_ipc_method(data)
        flipped = data.copy()
        flipped["g"] = 1.0 - flipped["g"]
        est_flipped, se_flipped = sim._run_ipc_method(flipped)
        assert est_flipped == pytest.approx(-est, abs=1e-10)
        assert se_flipped == pytest.approx(se, rel=1e-10)


class TestRunCondition:
    def test_frame_shape_and_order(self):
        cond = SimCondition(0.2, 0.0, 125, 4, 11)
        records = sim.run_condition(cond, n_jobs=1)
        assert len(records) == 4 * 3
        assert list(records["rep"].unique()) == [0, 1, 2, 3]

    def test_parallel_matches_serial(self):
        cond = SimCondition(0.2, 0.0, 125, 6, 13)
        serial = sim.run_condition(cond, n_jobs=1)
        parallel = sim.run_condition(cond, n_jobs=2)
        pd.testing.assert_frame_equal(serial, parallel)


class TestSummarize:
    def test_exclusion_guard(self):
        records = pd.DataFrame(
            {
                "true_diff": 0.0,
                "dif_lambda": 0.0,
                "n_per_group": 125,
                "rep": range(20),
                "method": "ipc",
                "estimate": 0.0,
                "se": 1.0,
                "z": 0.0,
                "reject": False,
                "covered": True,
                "converged": [False, False] + [True] * 18,  # 10% excluded
                "error": "",
            }
        )
        with pytest.raises(RuntimeError):
            sim.summarize(records)

    def test_exclusions_below_cap_tolerated(self):
        records = pd.DataFrame(
            {
                "true_diff": 0.0,
                "dif_lambda": 0.0,
                "n_per_group": 125,
                "rep": range(50),
                "method": "ipc",
                "estimate": 0.1,
                "se": 1.0,
                "z": 0.0,
                "reject": False,
                "covered": True,
                "converged": [False] + [True] * 49,  # 2% excluded
                "error": "",
            }
        )
        summary = sim.summarize(records)
        assert summary.loc[0, "n_excluded"] == 1

    def test_summary_columns(self):
        cond = SimCondition(0.2, 0.0, 125, 3, 5)
        summary = sim.summarize(sim.run_condition(cond, n_jobs=1))
        assert len(summary) == 3
        assert summary["bias"].equals(summary["mean_estimate"] - 0.2)
        assert ((summary["coverage_95"] >= 0) & (summary["coverage_95"] <= 1)).all()
        assert ((summary["rejection_rate"] >= 0) & (summary["rejection_rate"] <= 1)).all()


class TestFullStudy:
    def test_desk_scale_row_count(self):
        config = SimStudyConfig(
            true_diffs=[0.0, 0.1, 0.2],
            dif_lambdas=[0.0, 0.1],
            n_per_group=[125, 250],
            reps=2,
            seed=77,
        )
        result = full_study(config, n_jobs=1)
        # 2 sizes x 3 diffs x 2 lambdas x 3 methods = 36 method rows
        assert len(result.summary) == 36
        assert len(result.records) == 12 * 2 * 3

    def test_csv_deterministic(self):
        config = SimStudyConfig(
            true_diffs=[0.0],
            dif_lambdas=[0.0],
            n_per_group=[125],
            reps=3,
            seed=41,
        )
        a = full_study(config, n_jobs=1)
        b = full_study(config, n_jobs=2)
        assert a.summary.to_csv(index=False) == b.summary.to_csv(index=False)
        assert a.records.to_csv(index=False) == b.records.to_csv(index=False)

    def test_type1_table_shape(self):
        config = SimStudyConfig(
            true_diffs=[0.0, 0.2],
            dif_lambdas=[0.0, 0.1],
            n_per_group=[125],
            reps=2,
            seed=3,
            methods=["ipc"],
        )
        result = full_study(config, n_jobs=1)
        table = result.type1_table()
        assert len(table) == 1  # one sample size
        assert "n_per_group" in table.columns
        assert sum(c.startswith("ipc") for c in table.columns) == 2

    def test_config_roundtrip_and_validation(self):
        config = SimStudyConfig.from_dict({"reps": 5, "seed": 1})
        assert SimStudyConfig.from_dict(config.to_dict()) == config
        with pytest.raises(ValueError):
            SimStudyConfig.from_dict({"bogus": 1})
        with pytest.raises(ValueError):
            SimStudyConfig.from_dict({"methods": ["nope"]})

    def test_threads_resolution(self, monkeypatch):
        monkeypatch.setenv("IPC_SEM_THREADS", "3")
        assert sim.resolve_threads(None) == 3
        assert sim.resolve_threads(5) == 5
        monkeypatch.delenv("IPC_SEM_THREADS")
        assert sim.resolve_threads(None) >= 1
