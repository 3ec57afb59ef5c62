"""Pydantic request/response models for the HTTP service."""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field

SCHEMA_VERSION = 1


class TableData(BaseModel):
    """A column-named numeric table; null cells encode missing values."""

    columns: list[str]
    rows: list[list[Optional[float]]]


class ErrorInfo(BaseModel):
    error_type: Literal["parse", "data", "convergence", "internal"]
    message: str
    line: Optional[int] = None


class FitRequest(BaseModel):
    model_text: str
    data: TableData


class ParamEstimate(BaseModel):
    parameter: str
    lhs: str
    op: str
    rhs: str
    group: int = 1
    estimate: float
    se_naive: Optional[float] = None
    se_robust: Optional[float] = None
    fixed: bool = False


class FitResponse(BaseModel):
    schema_version: int = SCHEMA_VERSION
    converged: bool
    n: int
    p: int
    q: int
    df: int
    fmin: float
    chisq: float
    chisq_scaled: Optional[float] = None
    scaling_factor: Optional[float] = None
    parameters: list[ParamEstimate]
    warnings: list[str] = Field(default_factory=list)


class IpcRequest(BaseModel):
    model_text: str
    data: TableData
    centering: Literal["raw", "anchored"] = "anchored"
    prefix: str = "ipc."


class IpcResponse(BaseModel):
    schema_version: int = SCHEMA_VERSION
    table: TableData
    ipc_columns: list[str]
    estimates: dict[str, float]


class RegressRequest(BaseModel):
    data: TableData
    params: list[str]
    covariates: list[str] = Field(default_factory=list)
    prefix: str = "ipc."


class CoefficientOut(BaseModel):
    parameter: str
    covariate: str
    gamma: float
    se_robust: float
    se_classical: float
    t_stat: Optional[float] = None
    p_value: Optional[float] = None


class ParameterFitOut(BaseModel):
    parameter: str
    n_used: int
    r_squared: float
    degenerate: bool


class RegressResponse(BaseModel):
    schema_version: int = SCHEMA_VERSION
    coefficients: list[CoefficientOut]
    parameters: list[ParameterFitOut]


class MgsemRequest(BaseModel):
    model_text: str
    data: TableData
    group_column: str
    constraints: Literal["all_equal", "free"] = "all_equal"
    ipc_table: bool = False


class GroupParamEstimate(BaseModel):
    parameter: str
    group: int
    lhs: str
    op: str
    rhs: str
    estimate: float
    se_naive: float


class EpcMiOut(BaseModel):
    parameter: str
    epc_group1: float
    epc_group2: float
    diff: float
    se: float
    mi: float


class MgsemResponse(BaseModel):
    schema_version: int = SCHEMA_VERSION
    converged: bool
    n: int
    group_values: list[str]
    group_sizes: list[int]
    df: int
    chisq: float
    constraints: str
    parameters: list[GroupParamEstimate]
    epc_mi: list[EpcMiOut] = Field(default_factory=list)
    ipc_table: Optional[TableData] = None
    warnings: list[str] = Field(default_factory=list)


class SimulateRequest(BaseModel):
    true_diffs: list[float] = Field(default_factory=lambda: [0.0, 0.2])
    dif_lambdas: list[float] = Field(default_factory=lambda: [0.0, 0.2])
    n_per_group: list[int] = Field(default_factory=lambda: [125, 250])
    reps: int = 500
    seed: int = 20240501
    alpha: float = 0.05
    methods: list[str] = Field(
        default_factory=lambda: ["ipc", "mgsem_correct", "mgsem_misspecified"]
    )
    threads: Optional[int] = None


class SimulateResponse(BaseModel):
    schema_version: int = SCHEMA_VERSION
    summary_csv: str
    replications_csv: str
    type1_csv: str
    n_conditions: int
    n_excluded: int
    elapsed_seconds: float
