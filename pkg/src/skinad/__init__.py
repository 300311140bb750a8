"""Stochastic kriging for inadequate simulation models.

Joint metamodeling of simulation outputs and real-system observations,
with the SK and GPR baselines, likelihood fitting, replication allocation,
a production-line simulator and tools for studying common random numbers.
"""

__version__ = "0.1.0"

from .errors import EmptySampleError, FitError, InputError, NumericError  # noqa: E402
from .kernels import KernelSpec  # noqa: E402
from .metamodel import (  # noqa: E402
    GPR,
    SK,
    SKI,
    BasisSpec,
    Dataset,
    NoiseModel,
    PredictionResult,
    SkiParams,
    predict_gpr,
    predict_sk,
    predict_ski,
)
from .estimation import FitConfig, FitReport, fit_mle, plugin_predict  # noqa: E402

__all__ = [
    "__version__",
    "BasisSpec",
    "Dataset",
    "EmptySampleError",
    "FitConfig",
    "FitError",
    "FitReport",
    "GPR",
    "InputError",
    "KernelSpec",
    "NoiseModel",
    "NumericError",
    "PredictionResult",
    "SK",
    "SKI",
    "SkiParams",
    "fit_mle",
    "plugin_predict",
    "predict_gpr",
    "predict_sk",
    "predict_ski",
]
