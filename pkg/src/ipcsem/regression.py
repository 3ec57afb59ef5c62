"""Step three: regress IPC columns on covariates with robust inference.

OLS with HC1 heteroskedasticity-consistent standard errors; regression
t statistics are referred to Student-t(n - k), two-sample z statistics to
the standard normal.  The squared z from the group-difference test is the
generalized score test for freeing the parameter across groups.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats

from .errors import DataError
from .ipc import IPCMatrix

_DEGENERATE_TOL = 1e-12


@dataclass
class CoefficientRow:
    covariate: str
    gamma: float
    se_robust: float
    se_classical: float
    t_stat: float | None
    p_value: float | None


@dataclass
class ParameterRegression:
    parameter: str
    n_used: int
    r_squared: float
    degenerate: bool
    coefficients: list[CoefficientRow]

    def coefficient(self, covariate: str) -> CoefficientRow:
        for row in self.coefficients:
            if row.covariate == covariate:
                return row
        raise KeyError(f"no coefficient for covariate {covariate!r}")


@dataclass
class IPCRegressionResult:
    parameters: list[ParameterRegression] = field(default_factory=list)

    def for_parameter(self, name: str) -> ParameterRegression:
        for par in self.parameters:
            if par.parameter == name:
                return par
        raise KeyError(f"no results for parameter {name!r}")

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for par in self.parameters:
            for coef in par.coefficients:
                rows.append(
                    {
                        "parameter": par.parameter,
                        "covariate": coef.covariate,
                        "gamma": coef.gamma,
                        "se_robust": coef.se_robust,
                        "se_classical": coef.se_classical,
                        "t_stat": coef.t_stat,
                        "p_value": coef.p_value,
                        "r_squared": par.r_squared,
                        "n_used": par.n_used,
                    }
                )
        return pd.DataFrame(rows)


def regress(
    ipc_column: np.ndarray,
    covariates: np.ndarray,
    covariate_names: list[str] | None = None,
    parameter: str = "ipc",
) -> ParameterRegression:
    """OLS of one IPC column on a covariate matrix that includes the
    intercept column.  Robust (HC1) and classical standard errors."""
    y = np.asarray(ipc_column, dtype=float)
    z_mat = np.asarray(covariates, dtype=float)
    if z_mat.ndim != 2:
        raise DataError("covariates must be a 2-d matrix")
    n, k = z_mat.shape
    if y.shape != (n,):
        raise DataError("IPC column and covariates have different lengths")
    if n <= k:
        raise DataError(f"need n > k covariates (n={n}, k={k})")
    if covariate_names is None:
        covariate_names = [f"z{i}" for i in range(k)]

    ztz = z_mat.T @ z_mat
    rank = np.linalg.matrix_rank(ztz)
    if rank < k:
        raise DataError("covariate matrix is rank deficient")
    bread = np.linalg.inv(ztz)
    gamma = bread @ (z_mat.T @ y)
    resid = y - z_mat @ gamma

    scale = max(1.0, float(np.max(np.abs(y))))
    degenerate = bool(np.max(np.abs(resid), initial=0.0) <= _DEGENERATE_TOL * scale)

    meat = (z_mat * resid[:, None] ** 2).T @ z_mat
    vcov_robust = bread @ meat @ bread * (n / (n - k))
    sigma2 = float(resid @ resid) / (n - k)
    vcov_classical = sigma2 * bread

    se_robust = np.sqrt(np.maximum(np.diag(vcov_robust), 0.0))
    se_classical = np.sqrt(np.maximum(np.diag(vcov_classical), 0.0))

    sst = float(np.sum((y - y.mean()) ** 2))
    sse = float(resid @ resid)
    r_squared = 0.0 if sst <= 0.0 else 1.0 - sse / sst

    coefficients = []
    for j, name in enumerate(covariate_names):
        if degenerate or se_robust[j] == 0.0:
            t_stat = p_value = None
        else:
            t_stat = float(gamma[j] / se_robust[j])
            p_value = float(2.0 * stats.t.sf(abs(t_stat), n - k))
        coefficients.append(
            CoefficientRow(
                covariate=name,
                gamma=float(gamma[j]),
                se_robust=float(se_robust[j]),
                se_classical=float(se_classical[j]),
                t_stat=t_stat,
                p_value=p_value,
            )
        )
    return ParameterRegression(
        parameter=parameter,
        n_used=n,
        r_squared=r_squared,
        degenerate=degenerate,
        coefficients=coefficients,
    )


@dataclass
class GroupDifference:
    """Two-sample difference of IPC means with its robust z test."""

    diff: float
    se: float
    z: float
    p_value: float
    group_values: tuple
    group_means: tuple[float, float]
    group_sizes: tuple[int, int]


def group_difference_test(ipc_column: np.ndarray, group: np.ndarray) -> GroupDifference:
    """Difference in IPC means between two groups with unpooled robust SE.

    diff = mean(group 2) - mean(group 1) with groups in sorted value order;
    se uses divisor-n within-group variances so that z^2 equals the
    generalized modification index exactly.
    """
    y = np.asarray(ipc_column, dtype=float)
    group = np.asarray(group)
    if y.shape[0] != group.shape[0]:
        raise DataError("IPC column and group vector have different lengths")
    values = np.unique(group)
    if values.shape[0] != 2:
        raise DataError(f"need exactly 2 non-empty groups, found {values.shape[0]}")
    y1 = y[group == values[0]]
    y2 = y[group == values[1]]
    n1, n2 = y1.shape[0], y2.shape[0]
    mean1, mean2 = float(y1.mean()), float(y2.mean())
    var1 = float(np.mean((y1 - mean1) ** 2))
    var2 = float(np.mean((y2 - mean2) ** 2))
    diff = mean2 - mean1
    se = float(np.sqrt(var1 / n1 + var2 / n2))
    if se == 0.0:
        z = 0.0 if diff == 0.0 else float(np.sign(diff) * np.inf)
    else:
        z = diff / se
    p_value = float(2.0 * stats.norm.sf(abs(z)))
    return GroupDifference(
        diff=diff,
        se=se,
        z=z,
        p_value=p_value,
        group_values=(values[0], values[1]),
        group_means=(mean1, mean2),
        group_sizes=(n1, n2),
    )


def multi_regress(
    ipcs: IPCMatrix,
    covariates,
    selection: list[str] | None = None,
    covariate_names: list[str] | None = None,
) -> IPCRegressionResult:
    """Regress selected IPC columns on covariates (intercept added here).

    Rows with missing covariate values are dropped listwise; ``n_used``
    reports the retained count.
    """
    if isinstance(covariates, pd.DataFrame):
        covariate_names = list(covariates.columns)
        cov = covariates.to_numpy(dtype=float)
    else:
        cov = np.asarray(covariates, dtype=float)
        if cov.ndim == 1:
            cov = cov[:, None]
        if covariate_names is None:
            covariate_names = [f"z{i + 1}" for i in range(cov.shape[1])]
    if cov.shape[0] != ipcs.n:
        raise DataError("covariates and IPC matrix have different row counts")

    if selection is None:
        selection = list(ipcs.param_names)
    else:
        unknown = [s for s in selection if s not in ipcs.param_names]
        if unknown:
            raise KeyError(f"unknown parameter selection: {unknown}")

    keep = np.isfinite(cov).all(axis=1)
    z_mat = np.column_stack([np.ones(int(keep.sum())), cov[keep]])
    names = ["intercept"] + list(covariate_names)

    result = IPCRegressionResult()
    for name in selection:
        column = ipcs.column(name)[keep]
        result.parameters.append(
            regress(column, z_mat, covariate_names=names, parameter=name)
        )
    return result
