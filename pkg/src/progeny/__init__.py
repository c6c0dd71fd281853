"""Total progeny of multi-type Galton-Watson processes: exact laws, decay rates, sampling."""

from .errors import ConvergenceError, ModelError, NoDataError, NumericAbort, PreconditionError, SolverDivergence
from .exact import ProgenyTable, arborescent_oracle, lagrange_good_oracle, recursion_oracle, solve_progeny
from .model import (
    OffspringModel,
    PoissonOffspring,
    TableOffspring,
    classify,
    load_model,
    mean_matrix,
    perron_root,
    poisson_model,
    ray,
    table_model,
    validate,
)
from .rate import gamma, gamma_closed_poisson, rho_star, tilt, tilt_diagnostics
from .series import TruncatedSeries
from .simulate import SimBatch, SimConfig, sample

__all__ = [
    "ConvergenceError",
    "ModelError",
    "NoDataError",
    "NumericAbort",
    "PreconditionError",
    "SolverDivergence",
    "ProgenyTable",
    "arborescent_oracle",
    "lagrange_good_oracle",
    "recursion_oracle",
    "solve_progeny",
    "OffspringModel",
    "PoissonOffspring",
    "TableOffspring",
    "classify",
    "load_model",
    "mean_matrix",
    "perron_root",
    "poisson_model",
    "ray",
    "table_model",
    "validate",
    "gamma",
    "gamma_closed_poisson",
    "rho_star",
    "tilt",
    "tilt_diagnostics",
    "TruncatedSeries",
    "SimBatch",
    "SimConfig",
    "sample",
]
