"""Moment-based estimation of exponential-family models from indirect supervision."""

__version__ = "0.1.0"

from .expfam import (
    FactorizedModel,
    FeatureMap,
    MomentVector,
    Params,
    distribution,
    factorized_fit,
    fisher_info,
    fit_from_moments,
    log_partition,
    mean_stats,
    sample,
)

__all__ = [
    "FactorizedModel",
    "FeatureMap",
    "MomentVector",
    "Params",
    "distribution",
    "factorized_fit",
    "fisher_info",
    "fit_from_moments",
    "log_partition",
    "mean_stats",
    "sample",
    "__version__",
]
