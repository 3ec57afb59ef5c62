"""Individual parameter contributions: the W transform and the IPC dataset.

W maps stacked per-observation moment contributions into parameter units;
its defining identity is W @ Delta = I.  Averaging the anchored IPC rows
reproduces the parameter estimates, and their covariance over n is the
robust (sandwich) parameter covariance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
import pandas as pd

from .errors import DataError, IdentificationError
from .moments import MomentContributions

if TYPE_CHECKING:  # pragma: no cover
    from .engine import FittedModel

CENTER_RAW = "raw"
CENTER_ANCHORED = "anchored"


@dataclass
class IPCMatrix:
    """Per-observation parameter contributions, one column per free parameter.

    In ``anchored`` mode the column means equal the parameter estimates; the
    ``raw`` mode differs per column by a constant shift only.
    """

    values: np.ndarray
    param_names: list[str]
    centering: str
    fit_ref: str

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def q(self) -> int:
        return self.values.shape[1]

    def column(self, name: str) -> np.ndarray:
        try:
            return self.values[:, self.param_names.index(name)]
        except ValueError:
            raise KeyError(f"unknown parameter {name!r}") from None

    def to_frame(self, prefix: str = "ipc.") -> pd.DataFrame:
        return pd.DataFrame(
            self.values, columns=[f"{prefix}{name}" for name in self.param_names]
        )


def transformation_matrix(fit: "FittedModel") -> np.ndarray:
    """W = J^-1 Delta' V mapping moment contributions to parameter units."""
    if not fit.converged:
        raise DataError("fit did not converge; W is undefined")
    try:
        return np.linalg.solve(fit.j_matrix, fit.delta.T @ fit.v_matrix)
    except np.linalg.LinAlgError as exc:
        raise IdentificationError("information matrix is singular") from exc


def compute_ipcs(
    fit: "FittedModel",
    contributions: MomentContributions,
    centering: str = CENTER_ANCHORED,
) -> IPCMatrix:
    """Transform moment contributions into the IPC dataset.

    ``raw`` rows are W @ c_i; ``anchored`` rows are theta_hat +
    W @ (c_i - implied moments), so anchored column means reproduce
    theta_hat.  Contributions must come from the same data (and moment
    convention) as the fit.
    """
    if centering not in (CENTER_RAW, CENTER_ANCHORED):
        raise ValueError(f"unknown centering {centering!r}")
    w_mat = transformation_matrix(fit)
    if contributions.rows.shape[1] != w_mat.shape[1]:
        raise DataError(
            f"contribution rows have {contributions.rows.shape[1]} columns, "
            f"expected {w_mat.shape[1]}"
        )
    if centering == CENTER_RAW:
        values = contributions.rows @ w_mat.T
    else:
        values = fit.theta_hat + (contributions.rows - fit.implied_stack) @ w_mat.T
    return IPCMatrix(
        values=values,
        param_names=list(fit.param_names),
        centering=centering,
        fit_ref=fit.ref,
    )


def attach_ipcs(data: pd.DataFrame, ipcs: IPCMatrix, prefix: str = "ipc.") -> pd.DataFrame:
    """Append IPC columns to the original table, preserving existing columns."""
    if len(data) != ipcs.n:
        raise DataError(
            f"row mismatch: data has {len(data)} rows, IPCs have {ipcs.n}"
        )
    ipc_frame = ipcs.to_frame(prefix=prefix)
    collisions = [c for c in ipc_frame.columns if c in data.columns]
    if collisions:
        raise DataError(f"IPC column names collide with data columns: {collisions}")
    out = data.reset_index(drop=True).copy()
    return pd.concat([out, ipc_frame], axis=1)
