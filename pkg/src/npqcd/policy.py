"""Threshold and window-size policies for the detectors."""

from __future__ import annotations

import math
from dataclasses import dataclass

from scipy.optimize import brentq

from .exceptions import ConfigError
from .validation import check_probability


def _ceil(v: float) -> int:
    # ceiling that ignores representation noise like 3.0000000000000004
    return math.ceil(v - 1e-9 * max(1.0, abs(v)))


def solve_nglr_threshold(alpha: float, varsigma: float = 3.0) -> float:
    """Solve b - varsigma * log(b) = |log alpha| + log 8 on the branch b > varsigma."""
    alpha = check_probability(alpha)
    if varsigma < 0:
        raise ConfigError(f"varsigma must be >= 0, got {varsigma}")
    rhs = abs(math.log(alpha)) + math.log(8.0)
    if varsigma == 0:
        return rhs

    def f(b):
        return b - varsigma * math.log(b) - rhs

    lo = varsigma
    if f(lo) >= 0:
        raise ConfigError(f"no threshold on the branch b > {varsigma} for alpha={alpha}")
    hi = max(2.0 * lo, rhs + 1.0)
    while f(hi) <= 0:
        hi *= 2.0
    b = brentq(f, lo, hi, xtol=1e-14, rtol=4 * 2.0**-52, maxiter=500)
    return float(b)


def nwla_threshold(alpha: float) -> float:
    return abs(math.log(check_probability(alpha)))


def parallel_threshold(alpha: float, max_window: int) -> float:
    if max_window < 1:
        raise ConfigError("max_window must be >= 1")
    return nwla_threshold(alpha) + math.log(max_window)


def nglr_window(b: float, eta: float = 1.5, divergence: float = 0.125) -> int:
    """Window m_b = ceil(eta * b / divergence) for a design divergence."""
    if not eta > 1:
        raise ConfigError(f"eta must exceed 1, got {eta}")
    if not divergence > 0:
        raise ConfigError(f"divergence must be positive, got {divergence}")
    return max(2, _ceil(eta * b / divergence))


def nwla_window(alpha: float, kappa: float) -> int:
    """Window w = max(2, ceil(|log alpha| ** kappa))."""
    if not 0 < kappa < 1:
        raise ConfigError(f"kappa must lie in (0, 1), got {kappa}")
    return max(2, _ceil(abs(math.log(check_probability(alpha))) ** kappa))


def kappa_star(gamma: float, dim: int = 1) -> float:
    """Window exponent maximizing the delay rate for a KDE on a gamma-Hölder class."""
    return (2.0 * gamma + dim) / (4.0 * gamma + dim)


def rho_star(gamma: float, dim: int = 1) -> float:
    return 2.0 * gamma / (4.0 * gamma + dim)


def rho_kappa(kappa: float, beta1: float) -> float:
    """Second-order delay rate min(kappa * beta1, 1 - kappa)."""
    if not 0 < kappa < 1:
        raise ConfigError(f"kappa must lie in (0, 1), got {kappa}")
    return min(kappa * beta1, 1.0 - kappa)


@dataclass(frozen=True)
class ThresholdPolicy:
    """How a target false-alarm rate maps to a threshold.

    mode is one of ``direct`` (use ``b``), ``nglr_solve``, ``nwla_log`` or
    ``parallel_log``.
    """

    mode: str = "direct"
    b: float | None = None
    varsigma: float = 3.0
    max_window: int = 1

    def threshold(self, alpha: float | None = None) -> float:
        if self.mode == "direct":
            if self.b is None:
                raise ConfigError("direct threshold policy needs b")
            return float(self.b)
        if alpha is None:
            raise ConfigError(f"threshold policy {self.mode!r} needs alpha")
        if self.mode == "nglr_solve":
            return solve_nglr_threshold(alpha, self.varsigma)
        if self.mode == "nwla_log":
            return nwla_threshold(alpha)
        if self.mode == "parallel_log":
            return parallel_threshold(alpha, self.max_window)
        raise ConfigError(f"unknown threshold policy {self.mode!r}")


@dataclass(frozen=True)
class WindowPolicy:
    """Window size either given directly or derived from (eta, divergence) for
    NGLR or from kappa for NWLA."""

    window: int | None = None
    eta: float = 1.5
    divergence: float | None = None
    kappa: float | None = None

    def nglr(self, b: float) -> int:
        if self.window is not None:
            return int(self.window)
        if self.divergence is None:
            raise ConfigError("NGLR window policy needs 'window' or 'divergence'")
        return nglr_window(b, self.eta, self.divergence)

    def nwla(self, alpha: float | None = None) -> int:
        if self.window is not None:
            return int(self.window)
        if self.kappa is None or alpha is None:
            raise ConfigError("NWLA window policy needs 'window' or ('kappa' and alpha)")
        return nwla_window(alpha, self.kappa)
