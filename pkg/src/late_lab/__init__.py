"""Covariate-adjusted estimators of the local average treatment effect.

Twenty-one LATE estimators (Wald-type ratios built from inverse probability
weighting, doubly robust, regression, matching, random forest and 2SLS
ingredients), a nonparametric bootstrap, and an empirical Monte Carlo engine
for comparing them.
"""

from importlib import metadata as _metadata

try:
    __version__ = _metadata.version("artifact")
except _metadata.PackageNotFoundError:  # pragma: no cover - source checkout
    __version__ = "0.1.0"

from .dataset import CsvSchema, Dataset, describe, load_csv, save_csv, standardized_difference
from .errors import LateLabError
from .estimators import ESTIMATORS, EstimatorSpec, LateEstimate, compute_trim_mask, estimate, estimate_many
from .inference import BootstrapResult, bootstrap_many, bootstrap_se, confidence_interval, percentile_interval

__all__ = [
    "__version__",
    "CsvSchema",
    "Dataset",
    "describe",
    "load_csv",
    "save_csv",
    "standardized_difference",
    "LateLabError",
    "ESTIMATORS",
    "EstimatorSpec",
    "LateEstimate",
    "compute_trim_mask",
    "estimate",
    "estimate_many",
    "BootstrapResult",
    "bootstrap_many",
    "bootstrap_se",
    "confidence_interval",
    "percentile_interval",
]
