"""Half-vectorization utilities and per-observation moment contributions.

The moment contribution of observation i stacks the raw observation (mean
part) and the scaled cross-product deviations (covariance part).  Averaging
the covariance part over rows reproduces the half-vectorized sample
covariance matrix exactly, which is the identity the IPC transformation
relies on.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataError

SCALE_N_MINUS_1 = "n_minus_1"
SCALE_N = "n"


def vech(mat: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Half-vectorize a symmetric matrix: stack the lower triangle column-major.

    Raises ``ValueError`` if ``mat`` is not symmetric within ``tol``.
    """
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {mat.shape}")
    if np.max(np.abs(mat - mat.T), initial=0.0) > tol:
        raise ValueError("matrix is not symmetric within tolerance")
    # For a symmetric matrix the upper triangle read row-major equals the
    # lower triangle read column-major.
    return mat[np.triu_indices(mat.shape[0])].copy()


def vech_indices(p: int) -> tuple[np.ndarray, np.ndarray]:
    """Row/column index pairs (i >= j) in vech order for dimension ``p``."""
    cols, rows = np.triu_indices(p)
    # triu (i<=j) read as (col, row) enumerates the lower triangle in
    # column-major order.
    return rows, cols


def unvech(v: np.ndarray) -> np.ndarray:
    """Inverse of :func:`vech`: rebuild the full symmetric matrix."""
    v = np.asarray(v, dtype=float)
    m = v.shape[0]
    p = int(round((np.sqrt(8 * m + 1) - 1) / 2))
    if p * (p + 1) // 2 != m:
        raise ValueError(f"vector of length {m} is not a valid vech")
    out = np.zeros((p, p))
    rows, cols = vech_indices(p)
    out[rows, cols] = v
    out[cols, rows] = v
    return out


def duplication_matrix(p: int) -> np.ndarray:
    """Binary matrix D of order p^2 x p(p+1)/2 with D @ vech(M) = vec(M).

    vec() stacks columns; vech ordering matches :func:`vech`.
    """
    if p < 1:
        raise ValueError("dimension must be >= 1")
    n_vech = p * (p + 1) // 2
    dup = np.zeros((p * p, n_vech))
    rows, cols = vech_indices(p)
    for k in range(n_vech):
        i, j = rows[k], cols[k]
        dup[j * p + i, k] = 1.0
        dup[i * p + j, k] = 1.0
    return dup


def duplication_pinv(p: int) -> np.ndarray:
    """Moore-Penrose inverse of the duplication matrix (D'D is diagonal)."""
    dup = duplication_matrix(p)
    return np.diag(1.0 / dup.sum(axis=0)) @ dup.T


@dataclass
class MomentContributions:
    """Per-observation mean and covariance moment contributions.

    ``rows`` is n x (p + p(p+1)/2): the first p columns repeat the raw
    observations, the remaining columns hold the scaled deviation
    cross-products.  Under the ``n_minus_1`` convention the column means of
    the covariance part equal vech of the unbiased sample covariance.
    """

    rows: np.ndarray
    center: np.ndarray
    scale_convention: str

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def p(self) -> int:
        return self.center.shape[0]

    @property
    def mean_part(self) -> np.ndarray:
        return self.rows[:, : self.p]

    @property
    def d_part(self) -> np.ndarray:
        return self.rows[:, self.p :]

    def column_means(self) -> np.ndarray:
        return self.rows.mean(axis=0)


def compute_d(
    data: np.ndarray,
    center: np.ndarray | None = None,
    convention: str = SCALE_N_MINUS_1,
) -> MomentContributions:
    """Build moment contributions for an n x p data matrix.

    The covariance part of row i is ``c * vech[(y_i - center)(y_i - center)']``
    with ``c = n/(n-1)`` under ``n_minus_1`` and ``c = 1`` under ``n``. When
    ``center`` is omitted the column means are used, which makes the column
    means of the covariance part equal the sample covariance under the
    stated convention.
    """
    data = np.asarray(data, dtype=float)
    if data.ndim != 2:
        raise DataError(f"expected a 2-d data matrix, got ndim={data.ndim}")
    n, p = data.shape
    if n < 2:
        raise DataError(f"need at least 2 observations, got {n}")
    if not np.isfinite(data).all():
        raise DataError("data contains non-finite values")
    if convention not in (SCALE_N_MINUS_1, SCALE_N):
        raise ValueError(f"unknown scale convention {convention!r}")
    if center is None:
        center = data.mean(axis=0)
    center = np.asarray(center, dtype=float)
    if center.shape != (p,):
        raise DataError(f"center must have length {p}")

    dev = data - center
    rows_idx, cols_idx = vech_indices(p)
    d = dev[:, rows_idx] * dev[:, cols_idx]
    if convention == SCALE_N_MINUS_1:
        d *= n / (n - 1.0)
    return MomentContributions(
        rows=np.hstack([data, d]), center=center, scale_convention=convention
    )


def gamma_hat(contrib: MomentContributions) -> np.ndarray:
    """Empirical covariance of the stacked moment contributions (divisor n)."""
    rows = contrib.rows
    n = rows.shape[0]
    n_cov = contrib.p * (contrib.p + 1) // 2
    if n <= n_cov:
        warnings.warn(
            f"n={n} does not exceed p(p+1)/2={n_cov}; the moment covariance "
            "estimate will be rank deficient",
            stacklevel=2,
        )
    dev = rows - rows.mean(axis=0)
    return dev.T @ dev / n


def normal_theory_gamma(sigma: np.ndarray) -> np.ndarray:
    """Asymptotic moment covariance under multivariate normality.

    Block diagonal: the mean block is sigma itself, the covariance block is
    2 * Dp(sigma kron sigma) Dp' with Dp the pseudo-inverse of the
    duplication matrix.
    """
    sigma = np.asarray(sigma, dtype=float)
    p = sigma.shape[0]
    dp = duplication_pinv(p)
    cov_block = 2.0 * dp @ np.kron(sigma, sigma) @ dp.T
    n_cov = p * (p + 1) // 2
    out = np.zeros((p + n_cov, p + n_cov))
    out[:p, :p] = sigma
    out[p:, p:] = cov_block
    return out
