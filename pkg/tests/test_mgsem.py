import numpy as np
import pandas as pd
import pytest

import ipcsem
from ipcsem import (
    ALL_EQUAL,
    FREE,
    DataError,
    ModelError,
    compute_group_ipcs,
    expand_multigroup,
    fit,
    fit_multigroup,
    generalized_epc_mi,
    group_difference_test,
    parse,
)
from ipcsem import simulate as sim

from conftest import draw_mvn


@pytest.fixture(scope="module")
def two_group_table():
    return parse(sim.TWO_GROUP_MODEL)


@pytest.fixture(scope="module")
def sample_250(two_group_table):
    cond = ipcsem.SimCondition(0.2, 0.0, 250, 1, 4242)
    return sim.simulate_dataset(cond, 0)


@pytest.fixture(scope="module")
def all_equal_fit(two_group_table, sample_250):
    return fit_multigroup(
        two_group_table, sample_250, sample_250["g"].to_numpy(), constraints=ALL_EQUAL
    )


class TestExpand:
    def test_all_equal_keeps_parameter_count(self, two_group_table):
        expanded = expand_multigroup(two_group_table, 2, ALL_EQUAL)
        assert expanded.q == two_group_table.q
        assert expanded.n_groups == 2

    def test_free_doubles_parameter_count(self, two_group_table):
        expanded = expand_multigroup(two_group_table, 2, FREE)
        assert expanded.q == 2 * two_group_table.q
        assert expanded.param_index("rho.g1") != expanded.param_index("rho.g2")

    def test_unknown_policy_rejected(self, two_group_table):
        with pytest.raises(ValueError):
            expand_multigroup(two_group_table, 2, "partial")


class TestFitMultigroup:
    def test_all_equal_on_duplicated_data_matches_single_group(self, two_group_table):
        sigma = np.array(
            [
                [1.8, 1.0, 0.25, 0.5],
                [1.0, 1.8, 0.25, 0.5],
                [0.25, 0.25, 1.05, 0.5],
                [0.5, 0.5, 0.5, 1.8],
            ]
        )
        data = draw_mvn(np.ones(4), sigma, 300, seed=7)
        single = fit(two_group_table, data)
        doubled = pd.concat([data, data], ignore_index=True)
        labels = np.repeat([0, 1], len(data))
        mg = fit_multigroup(two_group_table, doubled, labels, constraints=ALL_EQUAL)
        assert np.max(np.abs(mg.theta_hat - single.theta_hat)) < 1e-6

    def test_free_fit_recovers_group_correlations(self, two_group_table):
        cond = ipcsem.SimCondition(0.2, 0.0, 2000, 1, 31337)
        data = sim.simulate_dataset(cond, 0)
        mg = fit_multigroup(two_group_table, data, data["g"].to_numpy(), constraints=FREE)
        rho1 = mg.theta_hat[mg.table.param_index("rho.g1") - 1]
        rho2 = mg.theta_hat[mg.table.param_index("rho.g2") - 1]
        assert rho1 == pytest.approx(0.5, abs=0.05)
        assert rho2 == pytest.approx(0.7, abs=0.05)

    def test_free_chisq_not_larger_than_all_equal(self, two_group_table, sample_250, all_equal_fit):
        free = fit_multigroup(
            two_group_table, sample_250, sample_250["g"].to_numpy(), constraints=FREE
        )
        assert free.chisq <= all_equal_fit.chisq

    def test_group_too_small_rejected(self, two_group_table, sample_250):
        labels = np.zeros(len(sample_250))
        labels[:3] = 1
        with pytest.raises(DataError):
            fit_multigroup(two_group_table, sample_250, labels)

    def test_single_group_rejected(self, two_group_table, sample_250):
        with pytest.raises(DataError):
            fit_multigroup(two_group_table, sample_250, np.zeros(len(sample_250)))

    def test_label_length_mismatch(self, two_group_table, sample_250):
        with pytest.raises(DataError):
            fit_multigroup(two_group_table, sample_250, np.zeros(10))

    def test_misspecified_ties_still_track_large_differences(self):
        # with covariance parameters erroneously tied the difference is
        # still recovered, mildly attenuated; the free fit stays accurate
        cond = ipcsem.SimCondition(0.4, 0.2, 2000, 1, 2020)
        mis, free = [], []
        for rep in range(10):
            data = sim.simulate_dataset(cond, rep)
            mis.append(sim._run_mg_method(data, misspecified=True)[0])
            free.append(sim._run_mg_method(data, misspecified=False)[0])
        assert 0.3 < np.mean(mis) < 0.45
        assert np.mean(free) == pytest.approx(0.4, abs=0.04)


class TestEpcMi:
    def test_identical_groups_give_zero(self, two_group_table):
        sigma = np.eye(4) + 0.4
        data = draw_mvn(np.zeros(4), sigma, 200, seed=3)
        doubled = pd.concat([data, data], ignore_index=True)
        labels = np.repeat([0, 1], len(data))
        mg = fit_multigroup(two_group_table, doubled, labels, constraints=ALL_EQUAL)
        res = generalized_epc_mi(mg, "rho")
        assert res.diff == pytest.approx(0.0, abs=1e-12)
        assert res.mi == pytest.approx(0.0, abs=1e-12)
        ipcs, glab = compute_group_ipcs(mg)
        diffs = ipcs.values[glab == 1].mean(0) - ipcs.values[glab == 0].mean(0)
        assert np.allclose(diffs, 0.0, atol=1e-12)

    def test_equivalence_with_ipc_difference(self, all_equal_fit):
        ipcs, labels = compute_group_ipcs(all_equal_fit)
        for target in all_equal_fit.param_names:
            res = generalized_epc_mi(all_equal_fit, target)
            gd = group_difference_test(ipcs.column(target), labels)
            assert res.diff == pytest.approx(gd.diff, abs=1e-10)
            if res.mi > 1e-10:
                assert res.mi == pytest.approx(gd.z**2, rel=1e-10)

    def test_epc_anchors_match_group_moments(self, all_equal_fit):
        res = generalized_epc_mi(all_equal_fit, "rho")
        assert set(res.epc) == set(all_equal_fit.group_values)

    def test_unknown_target_rejected(self, all_equal_fit):
        with pytest.raises(KeyError):
            generalized_epc_mi(all_equal_fit, "nope")

    def test_free_fit_rejected(self, two_group_table, sample_250):
        free = fit_multigroup(
            two_group_table, sample_250, sample_250["g"].to_numpy(), constraints=FREE
        )
        with pytest.raises(ModelError):
            generalized_epc_mi(free, "rho.g1")
        with pytest.raises(ModelError):
            compute_group_ipcs(free)


class TestCustomConstraints:
    def test_shared_labels_tie_across_groups(self, two_group_table, sample_250):
        expanded = sim._misspecified_table()
        mg = fit_multigroup(
            two_group_table,
            sample_250,
            sample_250["g"].to_numpy(),
            expanded_table=expanded,
        )
        assert mg.constraints == "custom"
        # loadings tied: one index per loading; factor covariance per group
        assert mg.table.param_index("l2") > 0
        assert mg.table.param_index("phi.g1") != mg.table.param_index("phi.g2")
