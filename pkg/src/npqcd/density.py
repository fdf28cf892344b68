"""Kernel density estimation with leave-one-out evaluation, bandwidth rules,
density clipping and Monte Carlo loss estimators (MISE, KL-loss)."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .distributions import LOG_2PI, DensityModel, trial_seed
from .exceptions import ConfigError, NumericalError, StateError
from .validation import check_point, check_positive_int, check_stream


@dataclass(frozen=True)
class KernelSpec:
    """Kernel used by the estimators. Only the Gaussian kernel ships; it has
    zero first moment, so it satisfies the moment conditions up to order 1."""

    kind: str = "gaussian"
    order: int = 1

    def __post_init__(self):
        if self.kind != "gaussian":
            raise ConfigError(f"unsupported kernel {self.kind!r}")
        if self.order != 1:
            raise ConfigError("only order-1 kernels are implemented")


GAUSSIAN = KernelSpec()


@dataclass(frozen=True)
class BandwidthRule:
    """Bandwidth as a function of the number of samples ``w``.

    ``fixed`` returns ``h`` for every ``w``; ``power`` returns ``c * w**(-exponent)``.
    ``h`` and ``c`` may be per-dimension sequences for product kernels.
    """

    mode: str = "power"
    h: float | tuple = 1.0
    c: float | tuple = 1.0
    exponent: float = 0.2

    def __post_init__(self):
        if self.mode not in ("fixed", "power"):
            raise ConfigError(f"bandwidth mode must be 'fixed' or 'power', got {self.mode!r}")

    @classmethod
    def fixed(cls, h) -> "BandwidthRule":
        return cls(mode="fixed", h=h if np.isscalar(h) else tuple(h))

    @classmethod
    def power(cls, c=1.0, exponent=0.2) -> "BandwidthRule":
        return cls(mode="power", c=c if np.isscalar(c) else tuple(c), exponent=float(exponent))

    @classmethod
    def from_config(cls, cfg) -> "BandwidthRule":
        if isinstance(cfg, (int, float)):
            return cls.fixed(float(cfg))
        if isinstance(cfg, BandwidthRule):
            return cfg
        mode = cfg.get("mode", "power")
        if mode == "fixed":
            if "h" not in cfg:
                raise ConfigError("fixed bandwidth needs 'h'")
            return cls.fixed(cfg["h"])
        return cls.power(cfg.get("c", 1.0), cfg.get("exponent", 0.2))

    def __call__(self, w: int):
        return bandwidth_of(self, w)


def as_rule(bandwidth) -> BandwidthRule:
    """Coerce a float (fixed bandwidth), mapping or rule to a BandwidthRule."""
    if isinstance(bandwidth, BandwidthRule):
        return bandwidth
    return BandwidthRule.from_config(bandwidth)


def bandwidth_of(rule: BandwidthRule, w: int):
    """Bandwidth for ``w`` samples (float, or array for per-dimension rules)."""
    w = check_positive_int(w, "w")
    if rule.mode == "fixed":
        h = np.asarray(rule.h, dtype=np.float64)
    else:
        h = np.asarray(rule.c, dtype=np.float64) * float(w) ** (-rule.exponent)
    if not np.all(np.isfinite(h)) or np.any(h <= 0):
        raise ConfigError(f"bandwidth must be positive and finite, got {h} from {rule}")
    return float(h) if h.ndim == 0 else h


@dataclass(frozen=True)
class ClipConfig:
    """Band [floor, ceiling] applied to estimated density values before logs.

    ``floor=0`` disables the floor.
    """

    floor: float = 1e-12
    ceiling: float = math.inf

    def __post_init__(self):
        if self.floor < 0 or not self.floor < self.ceiling:
            raise ConfigError(f"need 0 <= floor < ceiling, got [{self.floor}, {self.ceiling}]")

    @property
    def log_floor(self) -> float:
        return math.log(self.floor) if self.floor > 0 else -math.inf

    @property
    def log_ceiling(self) -> float:
        return math.log(self.ceiling) if self.ceiling < math.inf else math.inf


NO_CLIP = ClipConfig(floor=0.0)


def clip_density(v, clip: ClipConfig):
    v = np.asarray(v, dtype=np.float64)
    if np.any(v < 0):
        raise ValueError("density values must be nonnegative")
    out = np.minimum(np.maximum(v, clip.floor), clip.ceiling)
    return float(out) if out.ndim == 0 else out


class WindowBuffer:
    """Bounded FIFO of the most recent observations, oldest first."""

    def __init__(self, capacity: int, dim: int = 1):
        self.capacity = check_positive_int(capacity, "capacity")
        self.dim = dim
        self._items: deque = deque(maxlen=self.capacity)

    def append(self, x) -> None:
        self._items.append(check_point(x, self.dim))

    def extend(self, X) -> None:
        for row in check_stream(X, self.dim):
            self._items.append(row)

    def clear(self) -> None:
        self._items.clear()

    def __len__(self) -> int:
        return len(self._items)

    @property
    def full(self) -> bool:
        return len(self._items) == self.capacity

    def array(self) -> np.ndarray:
        if not self._items:
            return np.empty((0, self.dim))
        return np.stack(self._items)


@dataclass(frozen=True)
class EstimatorRates:
    """Loss-decay exponents/constants of a density estimator.

    KL-loss <= C1 / w**beta1 and second moment <= C2 / w**beta2.
    """

    beta1: float
    beta2: float
    C1: float = 1.0
    C2: float = 1.0
    gamma: float | None = None
    dim: int = 1

    def __post_init__(self):
        if not self.beta1 > 0 or not 0 < self.beta2 < 2:
            raise ConfigError(f"need beta1 > 0 and 0 < beta2 < 2, got {self.beta1}, {self.beta2}")

    @classmethod
    def kde(cls, gamma: float, dim: int = 1, C1: float = 1.0, C2: float = 1.0) -> "EstimatorRates":
        """Rates of a KDE on a gamma-Hölder class: beta1 = beta2 = 2g / (2g + d)."""
        beta = 2.0 * gamma / (2.0 * gamma + dim)
        return cls(beta, beta, C1, C2, gamma, dim)


def _as_window(window, dim=None) -> np.ndarray:
    if isinstance(window, WindowBuffer):
        return window.array()
    return check_stream(window, dim)


def _log_kde(points: np.ndarray, data: np.ndarray, h) -> np.ndarray:
    # log KDE of `data` evaluated at each row of `points`
    h = np.broadcast_to(np.asarray(h, dtype=np.float64), (data.shape[1],))
    u = (points[:, None, :] - data[None, :, :]) / h
    log_k = -0.5 * np.sum(u * u, axis=2)
    norm = math.log(data.shape[0]) + np.sum(np.log(h)) + 0.5 * data.shape[1] * LOG_2PI
    with np.errstate(divide="ignore"):
        return np.log(np.sum(np.exp(log_k), axis=1)) - norm


def kde_eval(window, h, x, kernel: KernelSpec = GAUSSIAN) -> float:
    """Gaussian (product) KDE of the window evaluated at point ``x``."""
    data = _as_window(window)
    if len(data) == 0:
        raise StateError("KDE over an empty window")
    x = check_point(x, data.shape[1])
    return float(np.exp(_log_kde(x[None, :], data, h))[0])


def kde_eval_loo(window, leave_out: int, h, x, kernel: KernelSpec = GAUSSIAN) -> float:
    """KDE of the window with element ``leave_out`` removed, evaluated at ``x``."""
    data = _as_window(window)
    if len(data) < 2:
        raise StateError("leave-one-out estimate needs at least two samples")
    if not -len(data) <= leave_out < len(data):
        raise IndexError(f"leave_out={leave_out} out of range for window of {len(data)}")
    keep = np.ones(len(data), dtype=bool)
    keep[leave_out] = False
    return kde_eval(data[keep], h, x, kernel)


def loo_log_density(data: np.ndarray, h) -> np.ndarray:
    """log p_{-i}(X_i) for every sample: pairwise kernel matrix with the diagonal excluded."""
    data = check_stream(data)
    w, d = data.shape
    if w < 2:
        raise StateError("leave-one-out estimate needs at least two samples")
    h = np.broadcast_to(np.asarray(h, dtype=np.float64), (d,))
    u = (data[:, None, :] - data[None, :, :]) / h
    K = np.exp(-0.5 * np.sum(u * u, axis=2))
    np.fill_diagonal(K, 0.0)
    norm = math.log(w - 1) + np.sum(np.log(h)) + 0.5 * d * LOG_2PI
    with np.errstate(divide="ignore"):
        return np.log(K.sum(axis=1)) - norm


class KernelDensity(BaseEstimator):
    """Gaussian product-kernel density estimator with optional clipping.

    Parameters
    ----------
    bandwidth : float, mapping or BandwidthRule
        A float is a fixed bandwidth; rules are evaluated at the number of
        fitted samples.
    clip_floor, clip_ceiling : float
        Estimated densities are clipped into [clip_floor, clip_ceiling]
        before logs are taken.
    """

    def __init__(self, bandwidth=1.0, clip_floor=0.0, clip_ceiling=math.inf):
        self.bandwidth = bandwidth
        self.clip_floor = clip_floor
        self.clip_ceiling = clip_ceiling

    def fit(self, X, y=None):
        X = check_stream(X)
        if len(X) == 0:
            raise ValueError("cannot fit a KDE on zero samples")
        self.window_ = X
        self.n_features_in_ = X.shape[1]
        self.bandwidth_ = bandwidth_of(as_rule(self.bandwidth), len(X))
        self.clip_ = ClipConfig(self.clip_floor, self.clip_ceiling)
        return self

    def _clip_log(self, logv):
        return np.clip(logv, self.clip_.log_floor, self.clip_.log_ceiling)

    def score_samples(self, X) -> np.ndarray:
        """Clipped log-density at each row of ``X``."""
        check_is_fitted(self)
        X = check_stream(X, self.n_features_in_)
        return self._clip_log(_log_kde(X, self.window_, self.bandwidth_))

    def loo_score_samples(self) -> np.ndarray:
        """Clipped leave-one-out log-density at each fitted sample."""
        check_is_fitted(self)
        return self._clip_log(loo_log_density(self.window_, self.bandwidth_))

    def score(self, X, y=None) -> float:
        return float(np.sum(self.score_samples(X)))


def _model_grid(true: DensityModel, n_grid: int = 2048):
    if true.dim != 1:
        raise ConfigError("MISE is only implemented for univariate models")
    m, s = float(true.mean()[0]), float(true.std()[0])
    return np.linspace(m - 6 * s, m + 6 * s, n_grid)


def estimate_mise(true: DensityModel, w: int, rule, trials: int, seed: int,
                  estimator: DensityModel | None = None, kernel: KernelSpec = GAUSSIAN,
                  n_grid: int = 2048):
    """Monte Carlo MISE of the KDE from ``w`` samples of ``true``.

    Returns ``(mise, standard_error)``. Passing a model as ``estimator``
    replaces the KDE with that fixed density.
    """
    trials = check_positive_int(trials, "trials", 2)
    rule = as_rule(rule)
    grid = _model_grid(true, n_grid)
    p = true.pdf(grid)
    h = bandwidth_of(rule, w)
    ise = np.empty(trials)
    for t in range(trials):
        if estimator is not None:
            phat = estimator.pdf(grid)
        else:
            rng = np.random.default_rng(trial_seed(seed, t))
            phat = np.exp(_log_kde(grid[:, None], true.sample(rng, w), h))
        ise[t] = np.trapezoid((phat - p) ** 2, grid)
    if not np.all(np.isfinite(ise)):
        raise NumericalError("non-finite integrated squared error")
    return float(ise.mean()), float(ise.std(ddof=1) / math.sqrt(trials))


class LossEstimate(NamedTuple):
    kl_loss: float
    second_moment: float
    kl_loss_se: float
    second_moment_se: float
    trials: int


def kl_loss_terms(true: DensityModel, w: int, rule, clip: ClipConfig, trials: int, seed: int,
                  estimator: DensityModel | None = None, batch: int = 1024) -> np.ndarray:
    """Per-trial log(p(X) / p_hat(X)) with a fresh window and a fresh X each trial."""
    rule = as_rule(rule)
    h = bandwidth_of(rule, w)
    out = np.empty(trials)
    for start in range(0, trials, batch):
        stop = min(start + batch, trials)
        windows = np.empty((stop - start, w, true.dim))
        xs = np.empty((stop - start, true.dim))
        for t in range(start, stop):
            rng = np.random.default_rng(trial_seed(seed, t))
            windows[t - start] = true.sample(rng, w)
            xs[t - start] = true.sample(rng, 1)[0]
        if estimator is not None:
            log_phat = estimator.log_density(xs)
        else:
            hv = np.broadcast_to(np.asarray(h, dtype=np.float64), (true.dim,))
            u = (xs[:, None, :] - windows) / hv
            s = np.sum(np.exp(-0.5 * np.sum(u * u, axis=2)), axis=1)
            norm = math.log(w) + np.sum(np.log(hv)) + 0.5 * true.dim * LOG_2PI
            with np.errstate(divide="ignore"):
                log_phat = np.clip(np.log(s) - norm, clip.log_floor, clip.log_ceiling)
        out[start:stop] = true.log_density(xs) - log_phat
    bad = np.flatnonzero(~np.isfinite(out))
    if bad.size:
        t = int(bad[0])
        raise NumericalError(
            f"non-finite log ratio in trial {t} (w={w}, h={h}); enable a positive clip floor"
        )
    return out


def estimate_kl_loss(true: DensityModel, w: int, rule, clip: ClipConfig = ClipConfig(),
                     trials: int = 10_000, seed: int = 0,
                     estimator: DensityModel | None = None) -> LossEstimate:
    """Monte Carlo estimates of E[log(p/p_hat)(X)] and E[(log(p/p_hat)(X))^2]."""
    trials = check_positive_int(trials, "trials", 2)
    r = kl_loss_terms(true, w, rule, clip, trials, seed, estimator)
    r2 = r * r
    root = math.sqrt(trials)
    return LossEstimate(float(r.mean()), float(r2.mean()),
                        float(r.std(ddof=1) / root), float(r2.std(ddof=1) / root), trials)


def loglog_slope(ws, values) -> float:
    """Least-squares slope of log(values) against log(ws)."""
    ws = np.asarray(ws, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if np.any(values <= 0):
        raise NumericalError("log-log fit needs positive values")
    return float(np.polyfit(np.log(ws), np.log(values), 1)[0])
