"""Non-parametric quickest change detection with post-change density estimation."""

from .density import BandwidthRule, ClipConfig, KernelDensity, estimate_kl_loss, kde_eval, kde_eval_loo
from .detectors import (
    CuSum,
    GaussianGLRCuSum,
    NGLRCuSum,
    NWLACuSum,
    ParallelNWLACuSum,
    SRStatistic,
)
from .distributions import ChangePointProcess, DensityModel, kl_divergence, log_likelihood_ratio
from .exceptions import ConfigError, NumericalError, StateError
from .harness import check_q, estimate_delay, estimate_mrl, match_threshold, oc_curve
from .policy import (
    ThresholdPolicy,
    WindowPolicy,
    kappa_star,
    nglr_window,
    nwla_threshold,
    nwla_window,
    parallel_threshold,
    rho_star,
    solve_nglr_threshold,
)

__version__ = "0.1.0"

__all__ = [
    "BandwidthRule",
    "ChangePointProcess",
    "ClipConfig",
    "ConfigError",
    "CuSum",
    "DensityModel",
    "GaussianGLRCuSum",
    "KernelDensity",
    "NGLRCuSum",
    "NWLACuSum",
    "NumericalError",
    "ParallelNWLACuSum",
    "SRStatistic",
    "StateError",
    "ThresholdPolicy",
    "WindowPolicy",
    "check_q",
    "estimate_delay",
    "estimate_kl_loss",
    "estimate_mrl",
    "kappa_star",
    "kde_eval",
    "kde_eval_loo",
    "kl_divergence",
    "log_likelihood_ratio",
    "match_threshold",
    "nglr_window",
    "nwla_threshold",
    "nwla_window",
    "oc_curve",
    "parallel_threshold",
    "rho_star",
    "solve_nglr_threshold",
]
