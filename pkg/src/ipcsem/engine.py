"""Normal-theory maximum likelihood fitting of mean/covariance structures.

The minimizer is Fisher scoring on the moment score Delta' V (m - implied)
with backtracking on the discrepancy value; a BFGS pass on the exact
discrepancy gradient serves as fallback for hard starting points.  Scoring
solves the same estimating equation the IPC transformation is built from,
so the converged solution satisfies the first-order condition to near
machine precision, which the anchored-IPC identities depend on.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import ipc as _ipc
from .errors import ConvergenceError, DataError, IdentificationError, ModelError
from .model_spec import (
    OP_COVARIANCE,
    OP_INTERCEPT,
    OP_LOADING,
    OP_REGRESSION,
    ParamRow,
    ParamTable,
    RamBuilder,
    to_ram,
)
from .moments import (
    SCALE_N_MINUS_1,
    duplication_matrix,
    compute_d,
    gamma_hat,
    vech,
)

# Multiplier for the likelihood-ratio statistic: chisq = (n - 1) * fmin.
CHISQ_MULTIPLIER_OFFSET = 1

GRAD_TOL = 1e-6
GRAD_TOL_TIGHT = 1e-10
FTOL_REL = 1e-10
MAX_ITER_DEFAULT = 500


def implied_moments(ram: RamBuilder, theta: np.ndarray):
    """Model-implied mean vector and covariance matrix at ``theta``."""
    try:
        return ram.implied(theta)
    except np.linalg.LinAlgError as exc:
        raise ModelError("singular I - A at the given parameter values") from exc


def fml(
    sample_mu: np.ndarray,
    sample_sigma: np.ndarray,
    mu: np.ndarray,
    sigma: np.ndarray,
) -> float:
    """ML discrepancy between sample moments and implied moments.

    F = log|Sigma| + tr(S Sigma^-1) - log|S| - p + (ybar-mu)' Sigma^-1 (ybar-mu),
    nonnegative and zero only at exact equality.
    """
    sample_sigma = np.asarray(sample_sigma, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    p = sample_sigma.shape[0]
    try:
        chol_s = np.linalg.cholesky(sample_sigma)
    except np.linalg.LinAlgError as exc:
        raise DataError("sample covariance is not positive definite") from exc
    try:
        chol_m = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise DataError("implied covariance is not positive definite") from exc
    logdet_s = 2.0 * np.sum(np.log(np.diag(chol_s)))
    logdet_m = 2.0 * np.sum(np.log(np.diag(chol_m)))
    sigma_inv = _chol_inverse(chol_m)
    resid = np.asarray(sample_mu, dtype=float) - np.asarray(mu, dtype=float)
    return float(
        logdet_m
        + np.sum(sigma_inv * sample_sigma)
        - logdet_s
        - p
        + resid @ sigma_inv @ resid
    )


def _chol_inverse(chol: np.ndarray) -> np.ndarray:
    inv_chol = np.linalg.solve(chol, np.eye(chol.shape[0]))
    inv = inv_chol.T @ inv_chol
    return (inv + inv.T) / 2.0


def weight_matrix_nt(sigma_hat: np.ndarray) -> np.ndarray:
    """Normal-theory moment weight matrix, block diagonal over (mean, vech).

    Mean block: Sigma^-1.  Covariance block: 0.5 D'(Sigma^-1 kron Sigma^-1) D
    with D the duplication matrix.
    """
    sigma_hat = np.asarray(sigma_hat, dtype=float)
    p = sigma_hat.shape[0]
    try:
        chol = np.linalg.cholesky(sigma_hat)
    except np.linalg.LinAlgError as exc:
        raise DataError("covariance matrix is not positive definite") from exc
    sigma_inv = _chol_inverse(chol)
    dup = duplication_matrix(p)
    cov_block = 0.5 * dup.T @ np.kron(sigma_inv, sigma_inv) @ dup
    n_cov = p * (p + 1) // 2
    out = np.zeros((p + n_cov, p + n_cov))
    out[:p, :p] = sigma_inv
    out[p:, p:] = (cov_block + cov_block.T) / 2.0
    return out


def delta(ram: RamBuilder, theta_hat: np.ndarray, base_step: float = 1e-6) -> np.ndarray:
    """Jacobian of the stacked implied moments by central finite differences.

    Column j uses step max(base_step, base_step * |theta_j|).  Parameters
    the builder does not reference (other groups' parameters in a
    multigroup fit) get zero columns without evaluation.
    """
    theta_hat = np.asarray(theta_hat, dtype=float)
    q = theta_hat.shape[0]
    out = np.zeros((ram.n_moments, q))
    active = ram.active_params
    if active.size == 0:
        return out
    steps = base_step * np.maximum(1.0, np.abs(theta_hat[active]))
    thetas = np.tile(theta_hat, (2 * active.size, 1))
    rows = np.arange(active.size)
    thetas[2 * rows, active] += steps
    thetas[2 * rows + 1, active] -= steps
    stacks = ram.implied_stack_batch(thetas)
    out[:, active] = ((stacks[2 * rows] - stacks[2 * rows + 1]) / (2.0 * steps[:, None])).T
    return out


@dataclass
class FittedModel:
    """A converged single-group fit with all derived matrices."""

    table: ParamTable
    builder: RamBuilder
    observed: list[str]
    theta_hat: np.ndarray
    param_names: list[str]
    sigma_hat: np.ndarray
    mu_hat: np.ndarray
    delta: np.ndarray
    v_matrix: np.ndarray
    j_matrix: np.ndarray
    vcov_naive: np.ndarray
    vcov_sandwich: np.ndarray
    fmin: float
    chisq: float
    chisq_scaled: float | None
    scaling_factor: float | None
    df: int
    converged: bool
    n: int
    sample_mean: np.ndarray
    sample_cov: np.ndarray
    convention: str
    grad_norm: float
    n_iter: int
    warnings: list[str] = field(default_factory=list)

    @property
    def p(self) -> int:
        return self.sigma_hat.shape[0]

    @property
    def q(self) -> int:
        return self.theta_hat.shape[0]

    @property
    def implied_stack(self) -> np.ndarray:
        return np.concatenate([self.mu_hat, vech(self.sigma_hat)])

    @property
    def se_naive(self) -> np.ndarray:
        return np.sqrt(np.diag(self.vcov_naive))

    @property
    def se_robust(self) -> np.ndarray:
        return np.sqrt(np.diag(self.vcov_sandwich))

    @property
    def ref(self) -> str:
        digest = hashlib.sha1(np.round(self.theta_hat, 12).tobytes()).hexdigest()[:10]
        return f"fit-{self.n}x{self.p}-{digest}"

    def estimates(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "parameter": self.param_names,
                "estimate": self.theta_hat,
                "se_naive": self.se_naive,
                "se_robust": self.se_robust,
            }
        )


def extract_data(table: ParamTable, data, columns=None):
    """Resolve (observed_order, matrix) from a DataFrame or array."""
    if isinstance(data, pd.DataFrame):
        cols = list(data.columns)
        missing = [v for v in table.observed if v not in cols]
        if missing:
            raise DataError(f"data is missing model variables: {missing}")
        observed_order = [c for c in cols if c in set(table.observed)]
        mat = data.loc[:, observed_order].to_numpy(dtype=float)
        return observed_order, mat
    mat = np.asarray(data, dtype=float)
    if mat.ndim != 2:
        raise DataError("data must be a 2-d table")
    if columns is None:
        columns = list(table.observed)
    if mat.shape[1] != len(columns):
        raise DataError(
            f"data has {mat.shape[1]} columns but {len(columns)} names were given"
        )
    if set(table.observed) - set(columns):
        raise DataError(
            f"data is missing model variables: {sorted(set(table.observed) - set(columns))}"
        )
    observed_order = [c for c in columns if c in set(table.observed)]
    sel = [columns.index(c) for c in observed_order]
    return observed_order, mat[:, sel]


def starting_values(
    rows: list[ParamRow],
    q: int,
    latents: list[str],
    col_var: dict[str, float],
    col_mean: dict[str, float],
) -> np.ndarray:
    """Default starting vector: loadings 1, regressions 0, observed variances
    half the sample variance, latent variances 1, covariances 0, intercepts
    at the sample means.  An explicit ``start`` on a row wins."""
    theta = np.full(q, np.nan)
    latent_set = set(latents)
    for row in rows:
        if row.free_index is None:
            continue
        k = row.free_index - 1
        if not np.isnan(theta[k]):
            continue
        if row.start is not None:
            theta[k] = row.start
        elif row.op == OP_LOADING:
            theta[k] = 1.0
        elif row.op == OP_REGRESSION:
            theta[k] = 0.0
        elif row.op == OP_COVARIANCE and row.lhs == row.rhs:
            if row.lhs in latent_set:
                theta[k] = 1.0
            else:
                theta[k] = 0.5 * col_var.get(row.lhs, 1.0)
        elif row.op == OP_COVARIANCE:
            theta[k] = 0.0
        elif row.op == OP_INTERCEPT:
            theta[k] = col_mean.get(row.lhs, 0.0) if row.lhs not in latent_set else 0.0
    theta[np.isnan(theta)] = 0.0
    return theta


class _MomentObjective:
    """Discrepancy, score and information for a weighted sum of groups.

    Single-group fitting uses one term with weight 1; the multigroup fitter
    reuses the same machinery with weights n_g / n.
    """

    def __init__(self, builders, moments, weights, sample_logdets):
        self.builders = builders
        self.moments = moments
        self.weights = weights
        self.sample_logdets = sample_logdets

    def value(self, theta: np.ndarray) -> float:
        total = 0.0
        for builder, m, w, logdet_s in zip(
            self.builders, self.moments, self.weights, self.sample_logdets
        ):
            p = builder.p
            try:
                mu, sigma = builder.implied(theta)
                chol = np.linalg.cholesky(sigma)
            except np.linalg.LinAlgError:
                return np.inf
            sigma_inv = _chol_inverse(chol)
            logdet_m = 2.0 * np.sum(np.log(np.diag(chol)))
            s_mat = _unvech_fast(m[p:], p)
            resid = m[:p] - mu
            total += w * (
                logdet_m
                + np.sum(sigma_inv * s_mat)
                - logdet_s
                - p
                + resid @ sigma_inv @ resid
            )
        return float(total)

    def score_info(self, theta: np.ndarray):
        """Exact score (-1/2 the discrepancy gradient) and Fisher information.

        The score is sum_g w_g Delta' V (m_g - implied + adj_g) where adj_g
        carries the mean-residual outer product into the covariance rows;
        adj vanishes when the mean structure is saturated, where the score
        reduces to the moment form Delta' V (m - implied).  Returns None
        when the implied covariance is not positive definite.
        """
        q = theta.shape[0]
        score = np.zeros(q)
        info = np.zeros((q, q))
        for builder, m, w in zip(self.builders, self.moments, self.weights):
            p = builder.p
            try:
                stack = builder.implied_stack(theta)
                v_mat = weight_matrix_nt(_unvech_fast(stack[p:], p))
            except (np.linalg.LinAlgError, DataError):
                return None
            resid_mu = m[:p] - stack[:p]
            adj = np.zeros_like(m)
            adj[p:] = np.outer(resid_mu, resid_mu)[np.triu_indices(p)]
            dmat = delta(builder, theta)
            vd = v_mat @ dmat
            score += w * (vd.T @ (m - stack + adj))
            info += w * (dmat.T @ vd)
        return score, (info + info.T) / 2.0

    def raw_score(self, theta: np.ndarray) -> np.ndarray:
        """Moment-form score sum_g w_g Delta' V (m_g - implied)."""
        q = theta.shape[0]
        score = np.zeros(q)
        for builder, m, w in zip(self.builders, self.moments, self.weights):
            stack = builder.implied_stack(theta)
            v_mat = weight_matrix_nt(_unvech_fast(stack[builder.p :], builder.p))
            dmat = delta(builder, theta)
            score += w * (dmat.T @ (v_mat @ (m - stack)))
        return score

    def exact_gradient(self, theta: np.ndarray) -> np.ndarray:
        """Gradient of the discrepancy: -2 times the exact score."""
        pair = self.score_info(theta)
        if pair is None:
            raise DataError("implied covariance is not positive definite")
        return -2.0 * pair[0]


def _unvech_fast(v: np.ndarray, p: int) -> np.ndarray:
    out = np.zeros((p, p))
    iu = np.triu_indices(p)
    out[iu] = v
    out.T[iu] = v
    return out


def _optimize(objective: _MomentObjective, theta0: np.ndarray, max_iter: int):
    """Fisher scoring with Levenberg damping and backtracking on F."""
    theta = np.asarray(theta0, dtype=float).copy()
    f_val = objective.value(theta)
    if not np.isfinite(f_val):
        # restart wrapper retries from jittered starting values
        raise ConvergenceError("starting values give a non-positive-definite model")

    rel_change = np.inf
    tried_fallback = False
    n_iter = 0
    lam = 0.0
    stalled = 0
    for n_iter in range(1, max_iter + 1):
        pair = objective.score_info(theta)
        if pair is None:
            raise ConvergenceError("implied covariance became non-positive-definite")
        score, info = pair
        grad_norm = np.max(np.abs(score), initial=0.0)
        if grad_norm < GRAD_TOL_TIGHT:
            # Attainable F improvement from here is ~ score' J^-1 score.
            rel_change = 0.0
            break

        step = _damped_solve(info, score, lam)
        accepted = False
        alpha = 1.0
        for _ in range(30):
            cand = theta + alpha * step
            f_cand = objective.value(cand)
            if np.isfinite(f_cand) and f_cand <= f_val + 1e-13 * max(1.0, abs(f_val)):
                rel_change = abs(f_val - f_cand) / max(1.0, abs(f_val))
                theta, f_val = cand, f_cand
                accepted = True
                lam = 0.0
                break
            alpha *= 0.5
        if not accepted:
            if not tried_fallback:
                tried_fallback = True
                theta, f_val = _bfgs_fallback(objective, theta)
                continue
            lam = max(lam * 10.0, 1e-6 * float(np.mean(np.diag(info))))
            if lam > 1e6:
                break
            continue
        if grad_norm < GRAD_TOL and rel_change < FTOL_REL and np.max(np.abs(step)) < 1e-12:
            break
        # cheap exit from hopeless fits (Heywood ridges): no useful progress
        # while the gradient stays large
        stalled = stalled + 1 if (rel_change < 1e-12 and grad_norm > 1e-3) else 0
        if stalled > 30:
            break

    pair = objective.score_info(theta)
    if pair is None:
        raise ConvergenceError("implied covariance not positive definite at solution")
    score, info = pair
    grad_norm = float(np.max(np.abs(score), initial=0.0))
    converged = grad_norm < GRAD_TOL and (
        rel_change < FTOL_REL or grad_norm < GRAD_TOL_TIGHT
    )
    return theta, f_val, grad_norm, info, converged, n_iter


def optimize_with_restarts(
    objective: _MomentObjective,
    theta0: np.ndarray,
    max_iter: int,
    n_restarts: int = 1,
):
    """Run the optimizer, retrying from deterministically jittered starting
    values when the first attempt does not converge."""
    theta0 = np.asarray(theta0, dtype=float)
    best = None
    for attempt in range(n_restarts + 1):
        if attempt == 0:
            start = theta0
        else:
            rng = np.random.default_rng(763581 + attempt)
            start = theta0 * rng.uniform(0.6, 1.5, size=theta0.shape) + rng.normal(
                0.0, 0.1, size=theta0.shape
            )
        try:
            out = _optimize(objective, start, max_iter)
        except ConvergenceError:
            continue
        if out[4]:
            return out
        if best is None or out[1] < best[1]:
            best = out
    if best is not None:
        return best
    raise ConvergenceError("optimizer failed from all starting values")


def _damped_solve(info: np.ndarray, score: np.ndarray, lam: float) -> np.ndarray:
    mat = info if lam == 0.0 else info + lam * np.eye(info.shape[0])
    for _ in range(8):
        try:
            chol = np.linalg.cholesky(mat)
            return np.linalg.solve(chol.T, np.linalg.solve(chol, score))
        except np.linalg.LinAlgError:
            bump = max(1e-10, 1e-8 * float(np.mean(np.abs(np.diag(info)))))
            lam = max(lam * 10.0, bump)
            mat = info + lam * np.eye(info.shape[0])
    raise IdentificationError("information matrix is singular")


def _bfgs_fallback(objective: _MomentObjective, theta: np.ndarray):
    from scipy.optimize import minimize

    def fun(th):
        val = objective.value(th)
        return val if np.isfinite(val) else 1e12

    def jac(th):
        if not np.isfinite(objective.value(th)):
            return np.zeros_like(th)
        return objective.exact_gradient(th)

    res = minimize(fun, theta, jac=jac, method="BFGS", options={"maxiter": 150, "gtol": 1e-10})
    cand = res.x
    f_cand = objective.value(cand)
    if not np.isfinite(f_cand):
        return theta, objective.value(theta)
    return cand, f_cand


def fit(
    table: ParamTable,
    data,
    columns=None,
    convention: str = SCALE_N_MINUS_1,
    max_iter: int = MAX_ITER_DEFAULT,
) -> FittedModel:
    """Fit the model by normal-theory ML and populate all derived matrices.

    Raises ``DataError`` for unusable data, ``ConvergenceError`` when the
    optimizer does not reach the convergence criteria within ``max_iter``
    iterations, and ``IdentificationError`` when the information matrix is
    singular at the solution.  Negative variance estimates are flagged in
    ``warnings`` rather than barred.
    """
    if table.n_groups > 1:
        raise ModelError("fit() handles single-group tables; see mgsem for groups")
    observed_order, mat = extract_data(table, data, columns)
    n, p = mat.shape
    if n <= p:
        raise DataError(f"need more observations than variables (n={n}, p={p})")
    if not np.isfinite(mat).all():
        raise DataError("data contains non-finite values")

    ybar = mat.mean(axis=0)
    ddof = 1 if convention == SCALE_N_MINUS_1 else 0
    sample_cov = np.cov(mat, rowvar=False, ddof=ddof)
    sample_cov = np.atleast_2d(sample_cov)
    try:
        np.linalg.cholesky(sample_cov)
    except np.linalg.LinAlgError as exc:
        raise DataError("sample covariance is not positive definite") from exc

    builder = to_ram(table, observed_order)
    col_var = {name: sample_cov[i, i] for i, name in enumerate(observed_order)}
    col_mean = {name: ybar[i] for i, name in enumerate(observed_order)}
    theta0 = starting_values(table.rows, table.q, table.latents, col_var, col_mean)

    m = np.concatenate([ybar, vech(sample_cov)])
    logdet_s = 2.0 * np.sum(np.log(np.diag(np.linalg.cholesky(sample_cov))))
    objective = _MomentObjective([builder], [m], [1.0], [logdet_s])

    theta_hat, fmin, grad_norm, info, converged, n_iter = optimize_with_restarts(
        objective, theta0, max_iter
    )
    # With free intercepts the mean structure is saturated, so the moment
    # score coincides with the exact score at the optimum; report and gate
    # on the moment form (the first-order condition the IPC anchoring uses).
    grad_norm = float(np.max(np.abs(objective.raw_score(theta_hat)), initial=0.0))
    converged = converged and grad_norm < GRAD_TOL
    if not converged:
        raise ConvergenceError(
            f"no convergence after {n_iter} iterations (grad inf-norm {grad_norm:.2e})"
        )

    mu_hat, sigma_hat = builder.implied(theta_hat)
    dmat = delta(builder, theta_hat)
    v_mat = weight_matrix_nt(sigma_hat)
    j_mat = dmat.T @ v_mat @ dmat
    j_mat = (j_mat + j_mat.T) / 2.0
    try:
        chol_j = np.linalg.cholesky(j_mat)
    except np.linalg.LinAlgError as exc:
        raise IdentificationError(
            "information matrix Delta'V Delta is singular; "
            "the model appears not to be identified"
        ) from exc
    inv_chol = np.linalg.solve(chol_j, np.eye(table.q))
    j_inv = inv_chol.T @ inv_chol

    fit_warnings = []
    for row in table.rows:
        if (
            row.free_index is not None
            and row.op == OP_COVARIANCE
            and row.lhs == row.rhs
            and theta_hat[row.free_index - 1] < 0
        ):
            fit_warnings.append(
                f"negative variance estimate for {row.name()}: "
                f"{theta_hat[row.free_index - 1]:.6g}"
            )

    n_moments = builder.n_moments
    df = n_moments - table.q
    chisq = (n - CHISQ_MULTIPLIER_OFFSET) * fmin

    model = FittedModel(
        table=table,
        builder=builder,
        observed=observed_order,
        theta_hat=theta_hat,
        param_names=table.param_names(),
        sigma_hat=sigma_hat,
        mu_hat=mu_hat,
        delta=dmat,
        v_matrix=v_mat,
        j_matrix=j_mat,
        vcov_naive=j_inv / n,
        vcov_sandwich=np.zeros((table.q, table.q)),
        fmin=fmin,
        chisq=chisq,
        chisq_scaled=None,
        scaling_factor=None,
        df=df,
        converged=converged,
        n=n,
        sample_mean=ybar,
        sample_cov=sample_cov,
        convention=convention,
        grad_norm=grad_norm,
        n_iter=n_iter,
        warnings=fit_warnings,
    )

    contributions = compute_d(mat, center=None, convention=convention)
    model.vcov_sandwich = vcov_sandwich(model, contributions)
    if df > 0:
        gamma = gamma_hat(contributions)
        model.chisq_scaled, model.scaling_factor = sb_scaled_chisq(model, gamma)
    return model


def vcov_sandwich(fitted: FittedModel, contributions) -> np.ndarray:
    """Robust parameter covariance: the covariance of the IPC rows over n."""
    ipcs = _ipc.compute_ipcs(fitted, contributions, centering=_ipc.CENTER_ANCHORED)
    dev = ipcs.values - ipcs.values.mean(axis=0)
    n = ipcs.values.shape[0]
    return dev.T @ dev / n / n


def sb_scaled_chisq(fitted: FittedModel, gamma: np.ndarray):
    """Mean-corrected chi-square: scaling factor tr(U Gamma) / df with
    U = V - V Delta J^-1 Delta' V.  Undefined (None) for df = 0."""
    if fitted.df <= 0:
        return None, None
    v_mat, dmat = fitted.v_matrix, fitted.delta
    vd = v_mat @ dmat
    u_mat = v_mat - vd @ np.linalg.solve(fitted.j_matrix, vd.T)
    scaling = float(np.sum(u_mat * np.asarray(gamma).T) / fitted.df)
    return fitted.chisq / scaling, scaling
