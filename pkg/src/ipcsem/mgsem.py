"""Multiple-group SEM with cross-group equality constraints.

Fits minimize the group-size-weighted pooled discrepancy
sum_g (n_g / n) F_g.  Two constraint policies are built in: ``all_equal``
ties every parameter across groups and ``free`` ties nothing.  Partial
constraints are expressed by assigning shared labels in an expanded
parameter table and passing it explicitly.

For an ``all_equal`` fit, ``generalized_epc_mi`` computes per-group
expected parameter changes with the full-parameter information matrix and
the sandwich-variance modification index; its group difference matches the
two-sample difference of the group-centered IPC means produced by
``compute_group_ipcs`` (an exact algebraic equivalence, used as a test
oracle).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .engine import (
    CHISQ_MULTIPLIER_OFFSET,
    _MomentObjective,
    delta,
    extract_data,
    optimize_with_restarts,
    starting_values,
    weight_matrix_nt,
)
from .errors import ConvergenceError, DataError, ModelError
from .ipc import CENTER_ANCHORED, IPCMatrix
from .model_spec import OP_COVARIANCE, ParamRow, ParamTable, assign_free_indices, to_ram
from .moments import SCALE_N_MINUS_1, compute_d, gamma_hat, vech

ALL_EQUAL = "all_equal"
FREE = "free"


def expand_multigroup(table: ParamTable, n_groups: int, policy: str) -> ParamTable:
    """Replicate a single-group table across groups under a constraint policy.

    ``all_equal`` keeps one free parameter per original parameter (the theta
    layout matches the single-group table); ``free`` gives every group its
    own copy, with labels namespaced per group as ``label.g<i>``.
    """
    if table.n_groups != 1:
        raise ModelError("expand_multigroup expects a single-group table")
    if policy not in (ALL_EQUAL, FREE):
        raise ValueError(f"unknown constraint policy {policy!r}")
    rows: list[ParamRow] = []
    for g in range(1, n_groups + 1):
        for row in table.rows:
            if row.fixed_value is not None:
                label = row.label
            elif policy == ALL_EQUAL:
                label = row.label or f"_tie{row.free_index}"
            else:
                label = f"{row.label}.g{g}" if row.label else None
            rows.append(
                ParamRow(
                    lhs=row.lhs,
                    op=row.op,
                    rhs=row.rhs,
                    group=g,
                    fixed_value=row.fixed_value,
                    label=label,
                    start=row.start,
                )
            )
    assign_free_indices(rows)
    return ParamTable(rows=rows, latents=list(table.latents), observed=list(table.observed))


@dataclass
class FittedMGModel:
    """A converged multiple-group fit."""

    table: ParamTable
    builders: list
    observed: list[str]
    group_values: list
    group_index: list[np.ndarray]
    group_data: list[np.ndarray]
    group_means: list[np.ndarray]
    group_covs: list[np.ndarray]
    theta_hat: np.ndarray
    param_names: list[str]
    j_matrix: np.ndarray
    vcov_naive: np.ndarray
    fmin: float
    chisq: float
    df: int
    converged: bool
    n: int
    constraints: str
    convention: str
    grad_norm: float
    n_iter: int
    warnings: list[str] = field(default_factory=list)

    @property
    def n_groups(self) -> int:
        return len(self.group_values)

    @property
    def group_sizes(self) -> list[int]:
        return [g.shape[0] for g in self.group_data]

    @property
    def q(self) -> int:
        return self.theta_hat.shape[0]

    def implied(self, group: int):
        """Implied (mu, sigma) for the 1-based group index."""
        return self.builders[group - 1].implied(self.theta_hat)

    def estimates(self) -> pd.DataFrame:
        se = np.sqrt(np.diag(self.vcov_naive))
        rows = []
        for row in self.table.rows:
            if row.free_index is None:
                continue
            k = row.free_index - 1
            rows.append(
                {
                    "group": row.group,
                    "lhs": row.lhs,
                    "op": row.op,
                    "rhs": row.rhs,
                    "parameter": row.name(),
                    "estimate": self.theta_hat[k],
                    "se_naive": se[k],
                }
            )
        return pd.DataFrame(rows)

    def contrast_variance(self, index_a: int, index_b: int) -> float:
        """Variance of theta[index_a] - theta[index_b] (1-based indices)."""
        a, b = index_a - 1, index_b - 1
        v = self.vcov_naive
        return float(v[a, a] + v[b, b] - 2.0 * v[a, b])


def fit_multigroup(
    table: ParamTable,
    data,
    group_labels,
    constraints: str = ALL_EQUAL,
    columns=None,
    expanded_table: ParamTable | None = None,
    convention: str = SCALE_N_MINUS_1,
    max_iter: int = 500,
) -> FittedMGModel:
    """Fit the model simultaneously in the groups defined by ``group_labels``.

    Pass ``expanded_table`` (with group column and shared labels already
    assigned) for partial cross-group constraints; ``constraints`` is
    ignored in that case.
    """
    observed_order, mat = extract_data(table, data, columns)
    labels = np.asarray(group_labels)
    if labels.shape[0] != mat.shape[0]:
        raise DataError("group labels and data have different lengths")
    if not np.isfinite(mat).all():
        raise DataError("data contains non-finite values")
    values = sorted(pd.unique(labels).tolist())
    n_groups = len(values)
    if n_groups < 2:
        raise DataError("need at least 2 groups")

    if expanded_table is not None:
        expanded = expanded_table
        if expanded.n_groups != n_groups:
            raise ModelError(
                f"expanded table has {expanded.n_groups} groups, data has {n_groups}"
            )
        constraints = "custom"
    else:
        expanded = expand_multigroup(table, n_groups, constraints)

    p = len(observed_order)
    n = mat.shape[0]
    ddof = 1 if convention == SCALE_N_MINUS_1 else 0

    group_index, group_data, group_means, group_covs = [], [], [], []
    builders, moments, weights, logdets = [], [], [], []
    for g, value in enumerate(values, start=1):
        idx = np.flatnonzero(labels == value)
        sub = mat[idx]
        if sub.shape[0] <= p:
            raise DataError(
                f"group {value!r} has n={sub.shape[0]} <= p={p} observations"
            )
        ybar = sub.mean(axis=0)
        cov = np.atleast_2d(np.cov(sub, rowvar=False, ddof=ddof))
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise DataError(f"group {value!r} has a singular covariance matrix") from exc
        group_index.append(idx)
        group_data.append(sub)
        group_means.append(ybar)
        group_covs.append(cov)
        builders.append(to_ram(expanded, observed_order, group=g))
        moments.append(np.concatenate([ybar, vech(cov)]))
        weights.append(sub.shape[0] / n)
        logdets.append(2.0 * np.sum(np.log(np.diag(chol))))

    theta0 = np.full(expanded.q, np.nan)
    for g in range(1, n_groups + 1):
        col_var = {name: group_covs[g - 1][i, i] for i, name in enumerate(observed_order)}
        col_mean = {name: group_means[g - 1][i] for i, name in enumerate(observed_order)}
        part = starting_values(
            expanded.rows_for_group(g), expanded.q, expanded.latents, col_var, col_mean
        )
        fill = np.isnan(theta0)
        group_touch = np.zeros(expanded.q, dtype=bool)
        for row in expanded.rows_for_group(g):
            if row.free_index is not None:
                group_touch[row.free_index - 1] = True
        theta0[fill & group_touch] = part[fill & group_touch]
    theta0[np.isnan(theta0)] = 0.0

    objective = _MomentObjective(builders, moments, weights, logdets)
    theta_hat, fmin, grad_norm, info, converged, n_iter = optimize_with_restarts(
        objective, theta0, max_iter
    )
    if not converged:
        raise ConvergenceError(
            f"multigroup fit: no convergence after {n_iter} iterations "
            f"(grad inf-norm {grad_norm:.2e})"
        )

    info = (info + info.T) / 2.0
    try:
        chol_j = np.linalg.cholesky(info)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceError("pooled information matrix is singular") from exc
    inv_chol = np.linalg.solve(chol_j, np.eye(expanded.q))
    vcov = inv_chol.T @ inv_chol / n

    fit_warnings = []
    for row in expanded.rows:
        if (
            row.free_index is not None
            and row.op == OP_COVARIANCE
            and row.lhs == row.rhs
            and theta_hat[row.free_index - 1] < 0
        ):
            fit_warnings.append(
                f"negative variance estimate for {row.name()} (group {row.group})"
            )

    n_moments = p + p * (p + 1) // 2
    return FittedMGModel(
        table=expanded,
        builders=builders,
        observed=observed_order,
        group_values=values,
        group_index=group_index,
        group_data=group_data,
        group_means=group_means,
        group_covs=group_covs,
        theta_hat=theta_hat,
        param_names=expanded.param_names(),
        j_matrix=info,
        vcov_naive=vcov,
        fmin=fmin,
        chisq=(n - CHISQ_MULTIPLIER_OFFSET) * fmin,
        df=n_groups * n_moments - expanded.q,
        converged=converged,
        n=n,
        constraints=constraints,
        convention=convention,
        grad_norm=grad_norm,
        n_iter=n_iter,
        warnings=fit_warnings,
    )


def _require_all_equal(fit: FittedMGModel) -> None:
    if fit.constraints != ALL_EQUAL:
        raise ModelError(
            "this operation requires a fit with all parameters tied (all_equal)"
        )


def _common_transform(fit: FittedMGModel):
    """Common Delta, V, J and W under all-equal constraints (the per-group
    quantities coincide because every group shares theta and structure)."""
    builder = fit.builders[0]
    dmat = delta(builder, fit.theta_hat)
    _, sigma = builder.implied(fit.theta_hat)
    v_mat = weight_matrix_nt(sigma)
    j_unit = dmat.T @ v_mat @ dmat
    j_unit = (j_unit + j_unit.T) / 2.0
    w_mat = np.linalg.solve(j_unit, dmat.T @ v_mat)
    stack = builder.implied_stack(fit.theta_hat)
    return dmat, v_mat, j_unit, w_mat, stack


@dataclass
class EpcMiResult:
    """Per-group expected parameter changes and the generalized score test."""

    target: str
    epc: dict
    diff: float
    se: float
    mi: float

    @property
    def z(self) -> float:
        return self.diff / self.se if self.se > 0 else 0.0


def generalized_epc_mi(fit: FittedMGModel, target_param: str) -> EpcMiResult:
    """EPC per group for freeing the cross-group tie on ``target_param``,
    their difference, and the sandwich-variance modification index.

    The EPC uses the full-parameter information matrix, not just the target
    entry; the MI divides the squared difference by its sandwich variance.
    Defined for two-group all-equal fits.
    """
    _require_all_equal(fit)
    if fit.n_groups != 2:
        raise ModelError("EPC/MI differences are defined for two groups")
    k = fit.table.param_index(target_param) - 1
    groups_with_param = {
        row.group
        for row in fit.table.rows
        if row.free_index == k + 1
    }
    if len(groups_with_param) != fit.n_groups:
        raise ModelError(
            f"parameter {target_param!r} is not equality-constrained across groups"
        )

    dmat, v_mat, j_unit, _, stack = _common_transform(fit)
    epcs = {}
    deltas = []
    for g, (value, m) in enumerate(
        zip(fit.group_values, _group_moment_vectors(fit)), start=1
    ):
        score_g = dmat.T @ (v_mat @ (m - stack))
        delta_g = np.linalg.solve(j_unit, score_g)
        deltas.append(delta_g)
        epcs[value] = float(delta_g[k])

    diff = float(deltas[1][k] - deltas[0][k])

    a_mat = np.linalg.solve(j_unit, dmat.T @ v_mat)
    var_mid = np.zeros((a_mat.shape[1], a_mat.shape[1]))
    for sub, n_g in zip(fit.group_data, fit.group_sizes):
        contrib = compute_d(sub, center=None, convention=fit.convention)
        var_mid += gamma_hat(contrib) / n_g
    var_diff = float((a_mat @ var_mid @ a_mat.T)[k, k])
    se = float(np.sqrt(max(var_diff, 0.0)))
    if var_diff <= 0.0:
        mi = 0.0
    else:
        mi = diff * diff / var_diff
    return EpcMiResult(target=target_param, epc=epcs, diff=diff, se=se, mi=mi)


def _group_moment_vectors(fit: FittedMGModel) -> list[np.ndarray]:
    return [
        np.concatenate([ybar, vech(cov)])
        for ybar, cov in zip(fit.group_means, fit.group_covs)
    ]


def compute_group_ipcs(fit: FittedMGModel) -> tuple[IPCMatrix, np.ndarray]:
    """Group-centered IPCs from an all-equal fit, in original row order.

    Moment contributions are centered at each group's own mean so that the
    group averages reproduce the group sample moments; the two-sample
    difference of these IPC means equals the generalized EPC difference.
    Returns the IPC matrix and the aligned group label vector.
    """
    _require_all_equal(fit)
    _, _, _, w_mat, stack = _common_transform(fit)
    n_total = sum(fit.group_sizes)
    q = fit.theta_hat.shape[0]
    values = np.empty((n_total, q))
    labels = np.empty(n_total, dtype=object)
    for idx, sub, value in zip(fit.group_index, fit.group_data, fit.group_values):
        contrib = compute_d(sub, center=None, convention=fit.convention)
        values[idx] = fit.theta_hat + (contrib.rows - stack) @ w_mat.T
        labels[idx] = value
    return (
        IPCMatrix(
            values=values,
            param_names=list(fit.param_names),
            centering=CENTER_ANCHORED,
            fit_ref=f"mgfit-{fit.n}x{len(fit.observed)}",
        ),
        labels,
    )
