"""Streaming change detectors with a scikit-learn style interface.

Each detector exposes

* ``update(x)`` / ``partial_fit(X)`` / ``fit(X)`` for streaming use: the
  statistic is advanced and the detector stops once it crosses ``threshold``;
* ``transform(X)``: the statistic trajectory of a fresh run over ``X``;
* ``predict(X)``: 0/1 alarm labels (1 from the first crossing on);
* ``stopping_time(X)``: the first crossing index (1-based) or None.

Internally every detector implements a resumable block scan
(``_scan(x, start, state)``) which the Monte Carlo harness drives directly,
applying any number of thresholds to one statistic trajectory.
"""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator

from . import _kernels
from .density import ClipConfig, as_rule, bandwidth_of
from .distributions import LOG_2PI, DensityModel
from .exceptions import ConfigError, StateError
from .validation import check_positive_int, check_stream


def first_crossing(stats: np.ndarray, b: float, first_allowed: int = 0) -> int | None:
    """0-based index of the first ``stats[n] >= b`` with ``n >= first_allowed``."""
    hits = np.flatnonzero(stats[first_allowed:] >= b)
    return int(hits[0]) + first_allowed if hits.size else None


class BaseDetector(BaseEstimator):
    """Common streaming machinery; subclasses provide ``_scan``."""

    tag = "base"
    # 0-based index of the first observation at which a stop may be declared
    _first_stop = 0

    @property
    def dim(self) -> int:
        return self.pre.dim

    # -- subclass hooks ----------------------------------------------------
    def _validate(self) -> None:
        pass

    @property
    def lookback(self) -> int:
        """Number of past observations the next statistic depends on."""
        return 0

    def _init_state(self):
        return 0.0

    def _scan(self, x: np.ndarray, start: int, state):
        raise NotImplementedError

    def _first_stop_index(self) -> int:
        return self._first_stop

    # -- batch interface ---------------------------------------------------
    def transform(self, X) -> np.ndarray:
        """Statistic after each observation of a fresh run over ``X``."""
        self._validate()
        X = check_stream(X, self.dim)
        stats, _ = self._scan(X, 0, self._init_state())
        return stats

    def stopping_time(self, X, threshold: float | None = None) -> int | None:
        b = self.threshold if threshold is None else threshold
        idx = first_crossing(self.transform(X), b, self._first_stop_index())
        return None if idx is None else idx + 1

    def predict(self, X) -> np.ndarray:
        """1 from the first threshold crossing onwards, 0 before."""
        X = check_stream(X, self.dim)
        labels = np.zeros(len(X), dtype=int)
        tau = self.stopping_time(X)
        if tau is not None:
            labels[tau - 1:] = 1
        return labels

    # -- streaming interface -----------------------------------------------
    def reset(self):
        self._validate()
        self._history = np.empty((0, self.dim))
        self._state = self._init_state()
        self.n_seen_ = 0
        self.statistic_ = 0.0
        self.stopped_ = False
        self.stopping_time_ = None
        return self

    def fit(self, X, y=None):
        return self.reset().partial_fit(X)

    def partial_fit(self, X, y=None):
        if not hasattr(self, "n_seen_"):
            self.reset()
        if self.stopped_:
            raise StateError(f"{self.tag} detector already stopped at n={self.stopping_time_}")
        X = check_stream(X, self.dim)
        if len(X) == 0:
            return self
        x = np.concatenate([self._history, X])
        start = len(self._history)
        stats, self._state = self._scan(x, start, self._state)
        first_ok = max(self._first_stop_index() - self.n_seen_, 0)
        idx = first_crossing(stats, self.threshold, first_ok)
        if idx is not None:
            # a stopped detector accepts no more input, so later state is irrelevant
            stats = stats[: idx + 1]
            self.stopped_ = True
            self.stopping_time_ = self.n_seen_ + idx + 1
        self.n_seen_ += len(stats)
        self.statistic_ = float(stats[-1])
        keep = self.lookback
        self._history = x[max(0, len(x) - keep):] if keep else x[:0]
        return self

    def update(self, x) -> tuple[float, bool]:
        """Consume one observation; return (statistic, stopped)."""
        self.partial_fit(np.atleast_1d(np.asarray(x, dtype=np.float64)).reshape(1, -1))
        return self.statistic_, self.stopped_


class CuSum(BaseDetector):
    """Page's CuSum for known pre- and post-change densities.

    W(n) = max(W(n-1), 0) + log(p1(x_n) / p0(x_n)), stopped at W(n) >= threshold.
    """

    tag = "cusum"

    def __init__(self, pre: DensityModel, post: DensityModel, threshold: float = math.inf):
        self.pre = pre
        self.post = post
        self.threshold = threshold

    def _validate(self):
        if self.pre.dim != self.post.dim:
            raise ConfigError("pre and post models must share a dimension")

    def log_likelihood_ratios(self, X) -> np.ndarray:
        X = check_stream(X, self.dim)
        return self.post.log_density(X) - self.pre.log_density(X)

    def _scan(self, x, start, state):
        z = self.log_likelihood_ratios(x[start:])
        stats = _kernels.reflected_sum(z, float(state))
        return stats, float(stats[-1]) if len(stats) else state


class GaussianGLRCuSum(BaseDetector):
    """Window-limited GLR-CuSum for a Gaussian mean shift with known variance.

    The post-change family is N(theta, std**2) with theta free; the pre-change
    density is N(mean, std**2). The supremum over theta is in closed form:
    sum_{i=k}^n log(p_theta / p0)(x_i) is maximized at
    S**2 / (2 std**2 (n-k+1)) with S = sum_{i=k}^n (x_i - mean).
    """

    tag = "glr"

    def __init__(self, window: int = 100, mean: float = 0.0, std: float = 1.0,
                 threshold: float = math.inf):
        self.window = window
        self.mean = mean
        self.std = std
        self.threshold = threshold

    @property
    def dim(self) -> int:
        return 1

    def _validate(self):
        check_positive_int(self.window, "window")
        if not self.std > 0:
            raise ConfigError("std must be positive")

    @property
    def lookback(self) -> int:
        return self.window - 1

    def _scan(self, x, start, state):
        stats = _kernels.gaussian_glr_scan(np.ascontiguousarray(x[:, 0]), start, int(self.window),
                                           float(self.mean), 1.0 / float(self.std) ** 2)
        return stats, state


class _KDEDetector(BaseDetector):
    # shared plumbing for the density-estimating detectors

    def _clip(self) -> ClipConfig:
        return ClipConfig(self.clip_floor, self.clip_ceiling)

    def _bandwidth(self, w: int) -> np.ndarray:
        h = bandwidth_of(as_rule(self.bandwidth), w)
        return np.broadcast_to(np.asarray(h, dtype=np.float64), (self.dim,)).copy()

    def _logp0(self, x):
        return self.pre.log_density(x)


class NGLRCuSum(_KDEDetector):
    """Window-limited non-parametric GLR CuSum.

    For each candidate change-point k in (n - window, n - 1], the post-change
    density is estimated on x_k..x_n by leave-one-out KDE and the statistic is

        max_k  sum_{i=k}^n log(p_hat_{-i}^{n,k}(x_i) / p0(x_i)).

    Parameters
    ----------
    pre : DensityModel
        Known pre-change density.
    window : int
        Maximum segment length m (segments have 2..m samples).
    bandwidth : float, mapping or BandwidthRule
        One bandwidth serves every segment; a rule is evaluated at ``window``.
    estimator : DensityModel, optional
        Replace the KDE by a fixed density (testing hook).
    """

    tag = "nglr"
    _first_stop = 1

    def __init__(self, pre: DensityModel, window: int = 100, bandwidth=10 ** -0.2,
                 clip_floor: float = 1e-12, clip_ceiling: float = math.inf,
                 estimator: DensityModel | None = None, threshold: float = math.inf):
        self.pre = pre
        self.window = window
        self.bandwidth = bandwidth
        self.clip_floor = clip_floor
        self.clip_ceiling = clip_ceiling
        self.estimator = estimator
        self.threshold = threshold

    def _validate(self):
        check_positive_int(self.window, "window", 2)

    @property
    def lookback(self) -> int:
        return self.window - 1

    def _scan(self, x, start, state):
        x = np.ascontiguousarray(x)
        logp0 = self._logp0(x)
        if self.estimator is not None:
            return self._scan_fixed(x, logp0, start), state
        h = self._bandwidth(self.window)
        clip = self._clip()
        base = float(np.sum(np.log(h)) + 0.5 * self.dim * LOG_2PI)
        stats = _kernels.nglr_scan(x, logp0, start, int(self.window), 1.0 / h, base,
                                   clip.log_floor, clip.log_ceiling)
        return stats, state

    def _scan_fixed(self, x, logp0, start):
        # with a fixed estimate the statistic is a max of windowed partial sums
        z = self.estimator.log_density(x) - logp0
        out = np.zeros(len(x) - start)
        for n in range(max(start, 1), len(x)):
            lo = max(0, n - self.window + 1)
            tails = np.cumsum(z[lo:n + 1][::-1])[::-1]
            out[n - start] = tails[:-1].max()
        return out


class NWLACuSum(_KDEDetector):
    """Non-parametric window-limited adaptive CuSum.

    For n > w the increment is log(p_hat(x_n) / p0(x_n)), where p_hat is the
    KDE of the previous ``window`` observations; the statistic is the reflected
    sum of increments and is held at 0 for the first ``window`` observations.
    """

    tag = "nwla"

    def __init__(self, pre: DensityModel, window: int = 20, bandwidth=None,
                 clip_floor: float = 1e-12, clip_ceiling: float = math.inf,
                 estimator: DensityModel | None = None, threshold: float = math.inf):
        self.pre = pre
        self.window = window
        self.bandwidth = bandwidth
        self.clip_floor = clip_floor
        self.clip_ceiling = clip_ceiling
        self.estimator = estimator
        self.threshold = threshold

    def _validate(self):
        check_positive_int(self.window, "window")

    def _bandwidth(self, w):
        if self.bandwidth is None:
            return np.full(self.dim, float(w) ** -0.2)
        return super()._bandwidth(w)

    @property
    def lookback(self) -> int:
        return self.window

    def _first_stop_index(self) -> int:
        return self.window

    def _llr(self, x, start):
        x = np.ascontiguousarray(x)
        logp0 = self._logp0(x)
        w = int(self.window)
        if self.estimator is not None:
            z = self.estimator.log_density(x[start:]) - logp0[start:]
            z[: max(w - start, 0)] = 0.0
            return z
        h = self._bandwidth(w)
        clip = self._clip()
        log_norm = float(math.log(w) + np.sum(np.log(h)) + 0.5 * self.dim * LOG_2PI)
        return _kernels.wla_llr(x, logp0, start, w, 1.0 / h, log_norm, clip.log_floor, clip.log_ceiling)

    def log_likelihood_ratios(self, X) -> np.ndarray:
        """Increments of a fresh run over ``X`` (0 for the first ``window`` rows)."""
        self._validate()
        return self._llr(check_stream(X, self.dim), 0)

    def cumulative_sum(self, X) -> np.ndarray:
        """Non-reflected sum U_n of the increments (U_n = 0 for n <= window)."""
        return np.cumsum(self.log_likelihood_ratios(X))

    def _scan(self, x, start, state):
        stats = _kernels.reflected_sum(self._llr(x, start), float(state))
        return stats, float(stats[-1]) if len(stats) else state


class SRStatistic(NWLACuSum):
    """Shiryaev-Roberts style statistic built on the NWLA increments.

    R_n = (1 + R_{n-1}) exp(z_n) for n > window and R_n = 0 before. ``transform``
    returns log R_n (-inf while R_n = 0) to avoid overflow.
    """

    tag = "sr"

    def _init_state(self):
        return -math.inf

    def _scan(self, x, start, state):
        z = self._llr(x, start)
        first_active = max(int(self.window) - start, 0)
        stats = _kernels.sr_log_recursion(z, first_active, float(state))
        return stats, float(stats[-1]) if len(stats) else state


class ParallelNWLACuSum(_KDEDetector):
    """Maximum of NWLA-CuSum statistics over every window size 1..max_window.

    The bandwidth rule is evaluated per window size. With a fixed bandwidth
    the kernel values at each step are shared across all window sizes.
    """

    tag = "parallel_nwla"
    _first_stop = 1

    def __init__(self, pre: DensityModel, max_window: int = 50, bandwidth=None,
                 clip_floor: float = 1e-12, clip_ceiling: float = math.inf,
                 threshold: float = math.inf):
        self.pre = pre
        self.max_window = max_window
        self.bandwidth = bandwidth
        self.clip_floor = clip_floor
        self.clip_ceiling = clip_ceiling
        self.threshold = threshold

    def _validate(self):
        check_positive_int(self.max_window, "max_window")

    def _bandwidth(self, w):
        if self.bandwidth is None:
            return np.full(self.dim, float(w) ** -0.2)
        return super()._bandwidth(w)

    @property
    def lookback(self) -> int:
        return self.max_window

    def _init_state(self):
        return np.zeros(int(self.max_window))

    def _tables(self):
        W = int(self.max_window)
        hs = np.stack([self._bandwidth(w) for w in range(1, W + 1)])
        log_norm = np.array([math.log(w) + np.sum(np.log(hs[w - 1])) + 0.5 * self.dim * LOG_2PI
                             for w in range(1, W + 1)])
        shared = self.bandwidth is not None and as_rule(self.bandwidth).mode == "fixed"
        return 1.0 / hs, log_norm, shared

    def _scan_all(self, x, start, state):
        x = np.ascontiguousarray(x)
        inv_h, log_norm, shared = self._tables()
        clip = self._clip()
        state = np.array(state, dtype=np.float64)
        all_stats = _kernels.parallel_wla_scan(x, self._logp0(x), start, inv_h, log_norm, shared,
                                               clip.log_floor, clip.log_ceiling, state)
        return all_stats, state

    def transform_all(self, X) -> np.ndarray:
        """Per-window statistics of a fresh run, shape (n_samples, max_window)."""
        self._validate()
        all_stats, _ = self._scan_all(check_stream(X, self.dim), 0, self._init_state())
        return all_stats

    def best_window(self, X) -> np.ndarray:
        """Window size attaining the maximum at each step (smallest on ties)."""
        return np.argmax(self.transform_all(X), axis=1) + 1

    def _scan(self, x, start, state):
        all_stats, state = self._scan_all(x, start, state)
        return all_stats.max(axis=1), state


DETECTORS = {
    cls.tag: cls
    for cls in (CuSum, GaussianGLRCuSum, NGLRCuSum, NWLACuSum, ParallelNWLACuSum, SRStatistic)
}
