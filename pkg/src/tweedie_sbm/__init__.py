"""Stochastic block models with compound Poisson-Gamma edge weights.

Library + batch CLI for fitting weighted static and dynamic networks:
time-varying covariate effects through penalized B-splines, community
labels through coordinate-ascent variational inference, and a grid search
over the power parameter.
"""

from ._errors import (
    AllZeroBlockError,
    ConfigError,
    DataError,
    FitError,
    NumericalError,
    OptimizerError,
    TweedieSbmError,
    UndefinedBlockError,
)
from .estimation import (
    FitConfig,
    FitResult,
    estimate_beta_t,
    fit,
    profile_loglik,
    read_fit_result,
    write_fit_result,
)
from .evaluation import err_beta, nmi, parameter_report
from .model_selection import CvReport, cross_validate, write_cv_report
from .network_data import (
    CommunityLabels,
    CovariateSet,
    DynamicNetwork,
    SimulationConfig,
    TimeGrid,
    generate,
    load_covariates,
    load_network,
    uniform_grid,
)
from .spline_basis import SplineBasis
from .tweedie_core import (
    CompoundParams,
    TweedieParams,
    from_compound,
    log_density,
    log_density_each,
    sample,
    sample_each,
    to_compound,
)

__version__ = "0.1.0"

__all__ = [
    "AllZeroBlockError",
    "CommunityLabels",
    "CompoundParams",
    "ConfigError",
    "CovariateSet",
    "CvReport",
    "DataError",
    "DynamicNetwork",
    "FitConfig",
    "FitError",
    "FitResult",
    "NumericalError",
    "OptimizerError",
    "SimulationConfig",
    "SplineBasis",
    "TimeGrid",
    "TweedieParams",
    "TweedieSbmError",
    "UndefinedBlockError",
    "__version__",
    "cross_validate",
    "err_beta",
    "estimate_beta_t",
    "fit",
    "from_compound",
    "generate",
    "load_covariates",
    "load_network",
    "log_density",
    "log_density_each",
    "nmi",
    "parameter_report",
    "profile_loglik",
    "read_fit_result",
    "sample",
    "sample_each",
    "to_compound",
    "uniform_grid",
    "write_cv_report",
    "write_fit_result",
]
