"""FastAPI service wrapping the modeling pipeline.

Stateless JSON endpoints over the core package: /fit, /ipc, /regress,
/mgsem, /simulate.  Package errors map to HTTP 400 with a typed payload
(parse | data | convergence) that the CLI translates into exit codes.
"""

from __future__ import annotations

import math
import time

import numpy as np
import pandas as pd
from fastapi import FastAPI, HTTPException

from .. import engine, mgsem, simulate
from ..errors import (
    ConvergenceError,
    DataError,
    IdentificationError,
    IpcSemError,
    ModelError,
    ModelSyntaxError,
)
from ..ipc import attach_ipcs, compute_ipcs
from ..model_spec import parse
from ..moments import compute_d
from ..regression import regress
from .schemas import (
    CoefficientOut,
    EpcMiOut,
    ErrorInfo,
    FitRequest,
    FitResponse,
    GroupParamEstimate,
    IpcRequest,
    IpcResponse,
    MgsemRequest,
    MgsemResponse,
    ParamEstimate,
    ParameterFitOut,
    RegressRequest,
    RegressResponse,
    SimulateRequest,
    SimulateResponse,
    TableData,
)


def _error_info(exc: IpcSemError) -> ErrorInfo:
    if isinstance(exc, ModelSyntaxError):
        return ErrorInfo(error_type="parse", message=str(exc), line=exc.line)
    if isinstance(exc, ModelError):
        return ErrorInfo(error_type="parse", message=str(exc))
    if isinstance(exc, (ConvergenceError, IdentificationError)):
        return ErrorInfo(error_type="convergence", message=str(exc))
    if isinstance(exc, DataError):
        return ErrorInfo(error_type="data", message=str(exc))
    return ErrorInfo(error_type="internal", message=str(exc))


def _http_error(exc: IpcSemError) -> HTTPException:
    return HTTPException(status_code=400, detail=_error_info(exc).model_dump())


def table_to_frame(table: TableData) -> pd.DataFrame:
    frame = pd.DataFrame(table.rows, columns=table.columns, dtype=float)
    return frame


def frame_to_table(frame: pd.DataFrame) -> TableData:
    rows = [
        [None if (isinstance(v, float) and not math.isfinite(v)) else float(v) for v in row]
        for row in frame.itertuples(index=False, name=None)
    ]
    return TableData(columns=[str(c) for c in frame.columns], rows=rows)


def _fit_parameters(fitted: engine.FittedModel) -> list[ParamEstimate]:
    se_naive = fitted.se_naive
    se_robust = fitted.se_robust
    out = []
    for row in fitted.table.rows:
        if row.free_index is not None:
            k = row.free_index - 1
            out.append(
                ParamEstimate(
                    parameter=row.name(),
                    lhs=row.lhs,
                    op=row.op,
                    rhs=row.rhs,
                    group=row.group,
                    estimate=float(fitted.theta_hat[k]),
                    se_naive=float(se_naive[k]),
                    se_robust=float(se_robust[k]),
                    fixed=False,
                )
            )
        else:
            out.append(
                ParamEstimate(
                    parameter=row.name(),
                    lhs=row.lhs,
                    op=row.op,
                    rhs=row.rhs,
                    group=row.group,
                    estimate=float(row.fixed_value),
                    fixed=True,
                )
            )
    return out


def create_app() -> FastAPI:
    app = FastAPI(title="ipcsem", version="0.1.0")

    @app.get("/health")
    def health():
        return {"status": "ok"}

    @app.post("/fit", response_model=FitResponse)
    def fit_endpoint(req: FitRequest) -> FitResponse:
        try:
            table = parse(req.model_text)
            frame = table_to_frame(req.data)
            fitted = engine.fit(table, frame)
        except IpcSemError as exc:
            raise _http_error(exc) from exc
        return FitResponse(
            converged=fitted.converged,
            n=fitted.n,
            p=fitted.p,
            q=fitted.q,
            df=fitted.df,
            fmin=fitted.fmin,
            chisq=fitted.chisq,
            chisq_scaled=fitted.chisq_scaled,
            scaling_factor=fitted.scaling_factor,
            parameters=_fit_parameters(fitted),
            warnings=list(fitted.warnings),
        )

    @app.post("/ipc", response_model=IpcResponse)
    def ipc_endpoint(req: IpcRequest) -> IpcResponse:
        try:
            table = parse(req.model_text)
            frame = table_to_frame(req.data)
            fitted = engine.fit(table, frame)
            _, mat = engine.extract_data(table, frame)
            contrib = compute_d(mat, center=None, convention=fitted.convention)
            ipcs = compute_ipcs(fitted, contrib, centering=req.centering)
            attached = attach_ipcs(frame, ipcs, prefix=req.prefix)
        except IpcSemError as exc:
            raise _http_error(exc) from exc
        return IpcResponse(
            table=frame_to_table(attached),
            ipc_columns=[f"{req.prefix}{name}" for name in ipcs.param_names],
            estimates={
                name: float(est)
                for name, est in zip(fitted.param_names, fitted.theta_hat)
            },
        )

    @app.post("/regress", response_model=RegressResponse)
    def regress_endpoint(req: RegressRequest) -> RegressResponse:
        try:
            frame = table_to_frame(req.data)
            if not req.params:
                raise DataError("no parameters selected")
            columns = list(frame.columns)
            resolved = []
            for name in req.params:
                if name in columns:
                    resolved.append(name)
                elif f"{req.prefix}{name}" in columns:
                    resolved.append(f"{req.prefix}{name}")
                else:
                    raise ModelError(f"unknown IPC column {name!r}")
            for cov in req.covariates:
                if cov not in columns:
                    raise ModelError(f"unknown covariate column {cov!r}")

            cov_mat = (
                frame.loc[:, req.covariates].to_numpy(dtype=float)
                if req.covariates
                else np.empty((len(frame), 0))
            )
            coefficients: list[CoefficientOut] = []
            parameters: list[ParameterFitOut] = []
            for col in resolved:
                y = frame[col].to_numpy(dtype=float)
                keep = np.isfinite(y)
                if cov_mat.shape[1]:
                    keep &= np.isfinite(cov_mat).all(axis=1)
                z_mat = np.column_stack(
                    [np.ones(int(keep.sum())), cov_mat[keep]]
                )
                res = regress(
                    y[keep],
                    z_mat,
                    covariate_names=["intercept"] + list(req.covariates),
                    parameter=col,
                )
                parameters.append(
                    ParameterFitOut(
                        parameter=col,
                        n_used=res.n_used,
                        r_squared=res.r_squared,
                        degenerate=res.degenerate,
                    )
                )
                coefficients.extend(
                    CoefficientOut(
                        parameter=col,
                        covariate=c.covariate,
                        gamma=c.gamma,
                        se_robust=c.se_robust,
                        se_classical=c.se_classical,
                        t_stat=c.t_stat,
                        p_value=c.p_value,
                    )
                    for c in res.coefficients
                )
        except IpcSemError as exc:
            raise _http_error(exc) from exc
        return RegressResponse(coefficients=coefficients, parameters=parameters)

    @app.post("/mgsem", response_model=MgsemResponse)
    def mgsem_endpoint(req: MgsemRequest) -> MgsemResponse:
        try:
            table = parse(req.model_text)
            frame = table_to_frame(req.data)
            if req.group_column not in frame.columns:
                raise ModelError(f"unknown group column {req.group_column!r}")
            if req.group_column in table.observed:
                raise ModelError("the group column cannot be a model variable")
            labels = frame[req.group_column].to_numpy()
            fitted = mgsem.fit_multigroup(
                table, frame, labels, constraints=req.constraints
            )
            epc_rows: list[EpcMiOut] = []
            ipc_table = None
            if req.constraints == mgsem.ALL_EQUAL:
                for name in fitted.param_names:
                    res = mgsem.generalized_epc_mi(fitted, name)
                    g1, g2 = fitted.group_values
                    epc_rows.append(
                        EpcMiOut(
                            parameter=name,
                            epc_group1=res.epc[g1],
                            epc_group2=res.epc[g2],
                            diff=res.diff,
                            se=res.se,
                            mi=res.mi,
                        )
                    )
                if req.ipc_table:
                    ipcs, _ = mgsem.compute_group_ipcs(fitted)
                    attached = attach_ipcs(frame, ipcs, prefix="ipc.")
                    ipc_table = frame_to_table(attached)
            elif req.ipc_table:
                raise DataError("the IPC table requires all_equal constraints")
        except IpcSemError as exc:
            raise _http_error(exc) from exc

        se = np.sqrt(np.diag(fitted.vcov_naive))
        params = [
            GroupParamEstimate(
                parameter=row.name(),
                group=row.group,
                lhs=row.lhs,
                op=row.op,
                rhs=row.rhs,
                estimate=float(fitted.theta_hat[row.free_index - 1]),
                se_naive=float(se[row.free_index - 1]),
            )
            for row in fitted.table.rows
            if row.free_index is not None
        ]
        return MgsemResponse(
            converged=fitted.converged,
            n=fitted.n,
            group_values=[str(v) for v in fitted.group_values],
            group_sizes=fitted.group_sizes,
            df=fitted.df,
            chisq=fitted.chisq,
            constraints=fitted.constraints,
            parameters=params,
            epc_mi=epc_rows,
            ipc_table=ipc_table,
            warnings=list(fitted.warnings),
        )

    @app.post("/simulate", response_model=SimulateResponse)
    def simulate_endpoint(req: SimulateRequest) -> SimulateResponse:
        started = time.perf_counter()
        try:
            config = simulate.SimStudyConfig(
                true_diffs=req.true_diffs,
                dif_lambdas=req.dif_lambdas,
                n_per_group=req.n_per_group,
                reps=req.reps,
                seed=req.seed,
                alpha=req.alpha,
                methods=req.methods,
            )
            bad = [m for m in config.methods if m not in simulate.ALL_METHODS]
            if bad:
                raise DataError(f"unknown methods: {bad}")
            result = simulate.full_study(config, n_jobs=req.threads)
        except IpcSemError as exc:
            raise _http_error(exc) from exc
        except (ValueError, RuntimeError) as exc:
            raise HTTPException(
                status_code=400,
                detail=ErrorInfo(error_type="data", message=str(exc)).model_dump(),
            ) from exc
        type1 = result.type1_table()
        return SimulateResponse(
            summary_csv=result.summary.to_csv(index=False),
            replications_csv=result.records.to_csv(index=False),
            type1_csv="" if type1.empty else type1.to_csv(index=False),
            n_conditions=len(config.conditions()),
            n_excluded=int(result.summary["n_excluded"].sum()),
            elapsed_seconds=time.perf_counter() - started,
        )

    return app


app = create_app()
