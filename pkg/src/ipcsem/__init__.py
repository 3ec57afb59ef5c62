"""Covariance/mean-structure modeling with IPC regression.

Workflow: parse a model description, fit it by normal-theory ML, transform
the data into individual parameter contributions (IPCs), and regress those
on covariates to detect and quantify parameter heterogeneity.
"""

from .engine import (
    FittedModel,
    delta,
    fit,
    fml,
    implied_moments,
    sb_scaled_chisq,
    vcov_sandwich,
    weight_matrix_nt,
)
from .errors import (
    ConvergenceError,
    DataError,
    IdentificationError,
    IpcSemError,
    ModelError,
    ModelSyntaxError,
)
from .ipc import (
    CENTER_ANCHORED,
    CENTER_RAW,
    IPCMatrix,
    attach_ipcs,
    compute_ipcs,
    transformation_matrix,
)
from .mgsem import (
    ALL_EQUAL,
    FREE,
    FittedMGModel,
    compute_group_ipcs,
    expand_multigroup,
    fit_multigroup,
    generalized_epc_mi,
)
from .model_spec import (
    ModelSyntax,
    ParamRow,
    ParamTable,
    RamBuilder,
    format_model,
    parse,
    to_ram,
)
from .moments import (
    MomentContributions,
    SCALE_N,
    SCALE_N_MINUS_1,
    compute_d,
    duplication_matrix,
    gamma_hat,
    normal_theory_gamma,
    unvech,
    vech,
)
from .regression import (
    GroupDifference,
    IPCRegressionResult,
    group_difference_test,
    multi_regress,
    regress,
)
from .simulate import (
    SimCondition,
    SimStudyConfig,
    SimStudyResult,
    full_study,
    population_moments,
    run_condition,
    run_replication,
)

__version__ = "0.1.0"

__all__ = [
    "ALL_EQUAL",
    "CENTER_ANCHORED",
    "CENTER_RAW",
    "ConvergenceError",
    "DataError",
    "FREE",
    "FittedMGModel",
    "FittedModel",
    "GroupDifference",
    "IPCMatrix",
    "IPCRegressionResult",
    "IdentificationError",
    "IpcSemError",
    "ModelError",
    "ModelSyntax",
    "ModelSyntaxError",
    "MomentContributions",
    "ParamRow",
    "ParamTable",
    "RamBuilder",
    "SCALE_N",
    "SCALE_N_MINUS_1",
    "SimCondition",
    "SimStudyConfig",
    "SimStudyResult",
    "attach_ipcs",
    "compute_d",
    "compute_group_ipcs",
    "compute_ipcs",
    "delta",
    "duplication_matrix",
    "expand_multigroup",
    "fit",
    "fit_multigroup",
    "fml",
    "format_model",
    "full_study",
    "gamma_hat",
    "generalized_epc_mi",
    "group_difference_test",
    "implied_moments",
    "multi_regress",
    "normal_theory_gamma",
    "parse",
    "population_moments",
    "regress",
    "run_condition",
    "run_replication",
    "sb_scaled_chisq",
    "to_ram",
    "transformation_matrix",
    "unvech",
    "vcov_sandwich",
    "vech",
    "weight_matrix_nt",
]
