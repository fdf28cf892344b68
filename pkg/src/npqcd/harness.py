"""Monte Carlo estimation of run length to false alarm, detection delay,
operating-characteristic curves and the leave-one-out product condition.

Every trial draws its own path from a seed derived from (master seed, trial
index), and results are reduced in trial order, so estimates are identical
for any number of worker threads.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .density import ClipConfig, as_rule, bandwidth_of
from .detectors import BaseDetector, NWLACuSum, SRStatistic, first_crossing
from .distributions import LOG_2PI, ChangePointProcess, DensityModel, trial_seed
from .exceptions import ConfigError
from .validation import check_positive_int

logger = logging.getLogger(__name__)

SCAN_BLOCK = 256
TRIAL_CHUNK = 32
DELAY_MAX_LEN = 10_000


def default_mrl_max_len(b: float) -> int:
    """Truncation point 50 * e^b for run-length-to-false-alarm trials."""
    return int(min(50.0 * math.exp(b), 1e9))


@dataclass(frozen=True)
class TrialRecord:
    detector: str
    threshold: float
    seed: int
    nu: float
    tau: int
    truncated: bool


@dataclass(frozen=True)
class RunLengthEstimate:
    mean: float
    se: float
    trunc_frac: float
    trials: int

    @property
    def status(self) -> str:
        return "truncated" if self.trunc_frac > 0.5 else "ok"

    @property
    def far(self) -> float:
        return 1.0 / self.mean

    @property
    def far_se(self) -> float:
        return self.se / self.mean**2


@dataclass(frozen=True)
class DelayEstimate:
    mean: float
    se: float
    premature_frac: float
    trunc_frac: float
    trials: int


@dataclass(frozen=True)
class OCPoint:
    detector: str
    threshold: float
    mrl: float
    mrl_se: float
    delay: float
    delay_se: float
    trunc_frac: float
    trials: int
    delay_trunc_frac: float = 0.0
    premature_frac: float = 0.0

    @property
    def far(self) -> float:
        return 1.0 / self.mrl

    @property
    def far_se(self) -> float:
        return self.mrl_se / self.mrl**2


@dataclass(frozen=True)
class ConditionReport:
    m: np.ndarray
    q: np.ndarray
    q_se: np.ndarray
    trials: int

    @property
    def margin(self) -> np.ndarray:
        """log Q(m) - 3 log m."""
        return np.log(self.q) - 3.0 * np.log(self.m)


def _check_thresholds(thresholds) -> np.ndarray:
    b = np.atleast_1d(np.asarray(thresholds, dtype=np.float64))
    if b.size == 0:
        raise ConfigError("threshold list is empty")
    if np.any(np.isnan(b)) or np.any(np.diff(b) < 0):
        raise ConfigError(f"thresholds must be ascending, got {b.tolist()}")
    return b


def scan_path(detector: BaseDetector, proc: ChangePointProcess, thresholds, max_len: int,
              block: int = SCAN_BLOCK) -> np.ndarray:
    """First-crossing times (1-based) of one path for each ascending threshold.

    The path is streamed in blocks until the largest threshold is crossed or
    ``max_len`` observations are used. Uncrossed thresholds get -1.
    """
    b = _check_thresholds(thresholds)
    taus = np.full(b.size, -1, dtype=np.int64)
    stream = proc.stream()
    state = detector._init_state()
    first = detector._first_stop_index()
    keep = detector.lookback
    hist = np.empty((0, proc.dim))
    n = 0
    run_max = -math.inf
    pending = 0
    while n < max_len and pending < b.size:
        new = stream.take(min(block, max_len - n))
        x = np.concatenate([hist, new])
        stats, state = detector._scan(x, len(hist), state)
        if n < first:
            stats = stats.copy()
            stats[: first - n] = -math.inf
        cm = np.maximum(np.maximum.accumulate(stats), run_max)
        while pending < b.size:
            idx = int(np.searchsorted(cm, b[pending], side="left"))
            if idx >= len(cm):
                break
            taus[pending] = n + idx + 1
            pending += 1
        run_max = cm[-1]
        n += len(new)
        hist = x[max(0, len(x) - keep):] if keep else x[:0]
    return taus


def run_trial(detector: BaseDetector, proc: ChangePointProcess, b: float, max_len: int) -> TrialRecord:
    """Stream one path into the detector until it crosses ``b`` or ``max_len``."""
    max_len = check_positive_int(max_len, "max_len")
    tau = int(scan_path(detector, proc, [b], max_len)[0])
    return TrialRecord(detector.tag, float(b), int(proc.seed), proc.nu,
                       tau if tau > 0 else max_len, tau < 0)


def run_trials(detector: BaseDetector, proc: ChangePointProcess, thresholds, trials: int,
               max_len: int, seed: int, threads: int = 1) -> np.ndarray:
    """First-crossing times for ``trials`` independent paths, shape (trials, n_thresholds)."""
    trials = check_positive_int(trials, "trials")
    max_len = check_positive_int(max_len, "max_len")
    b = _check_thresholds(thresholds)
    detector._validate()

    def work(lo):
        hi = min(lo + TRIAL_CHUNK, trials)
        return np.stack([
            scan_path(detector, proc.with_seed(trial_seed(seed, t)), b, max_len) for t in range(lo, hi)
        ])

    starts = range(0, trials, TRIAL_CHUNK)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(work, starts))
    else:
        chunks = [work(lo) for lo in starts]
    logger.info("%s: %d trials done (nu=%s, max_len=%d)", detector.tag, trials, proc.nu, max_len)
    return np.concatenate(chunks)


def trial_records(name: str, nu: float, thresholds, taus: np.ndarray, max_len: int,
                  seed: int) -> list[TrialRecord]:
    """Per-trial records for a (trials, n_thresholds) array from :func:`run_trials`."""
    b = _check_thresholds(thresholds)
    out = []
    for t in range(taus.shape[0]):
        s = trial_seed(seed, t)
        for j, bj in enumerate(b):
            tau = int(taus[t, j])
            out.append(TrialRecord(name, float(bj), s, nu,
                                   tau if tau > 0 else max_len, tau < 0))
    return out


def _mean_se(v: np.ndarray) -> tuple[float, float]:
    if v.size == 0:
        return math.nan, math.nan
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else math.nan
    return float(v.mean()), se


def summarize_run_lengths(taus: np.ndarray, max_len: int) -> list[RunLengthEstimate]:
    out = []
    for col in taus.T:
        truncated = col < 0
        rl = np.where(truncated, max_len, col).astype(np.float64)
        mean, se = _mean_se(rl)
        out.append(RunLengthEstimate(mean, se, float(truncated.mean()), col.size))
    flagged = [e for e in out if e.status == "truncated"]
    if flagged:
        logger.warning("%d threshold(s) had more than half of the trials hit max_len=%d; "
                       "their mean run lengths are lower bounds", len(flagged), max_len)
    return out


def summarize_delays(taus: np.ndarray, nu: int, max_len: int) -> list[DelayEstimate]:
    out = []
    for col in taus.T:
        truncated = col < 0
        tau = np.where(truncated, max_len, col)
        premature = tau < nu
        delay = (tau[~premature] - nu + 1).astype(np.float64)
        mean, se = _mean_se(delay)
        out.append(DelayEstimate(mean, se, float(premature.mean()), float(truncated.mean()), col.size))
    return out


def _no_change(proc: ChangePointProcess) -> ChangePointProcess:
    if proc.nu != math.inf:
        raise ConfigError("run length to false alarm needs a process without change (nu=inf)")
    return proc


def _with_change(proc: ChangePointProcess) -> int:
    if proc.nu == math.inf:
        raise ConfigError("detection delay needs a finite change-point")
    return int(proc.nu)


def estimate_mrl(proc: ChangePointProcess, detector: BaseDetector, b: float, trials: int,
                 max_len: int | None = None, seed: int = 0, threads: int = 1) -> RunLengthEstimate:
    """Mean run length E_inf[tau] with its standard error and truncation fraction."""
    trials = check_positive_int(trials, "trials", 2)
    max_len = max_len or default_mrl_max_len(b)
    taus = run_trials(detector, _no_change(proc), [b], trials, max_len, seed, threads)
    return summarize_run_lengths(taus, max_len)[0]


def estimate_delay(proc: ChangePointProcess, detector: BaseDetector, b: float, trials: int,
                   max_len: int = DELAY_MAX_LEN, seed: int = 0, threads: int = 1) -> DelayEstimate:
    """Mean of tau - nu + 1 over trials with tau >= nu; premature alarms counted apart."""
    trials = check_positive_int(trials, "trials", 2)
    nu = _with_change(proc)
    taus = run_trials(detector, proc, [b], trials, max_len, seed, threads)
    return summarize_delays(taus, nu, max_len)[0]


def oc_curve(pre: DensityModel, post: DensityModel, detector: BaseDetector, thresholds, trials: int,
             nu: int = 1, max_len_mrl: int | None = None, max_len_delay: int = DELAY_MAX_LEN,
             seed: int = 0, threads: int = 1, name: str | None = None,
             return_taus: bool = False):
    """One OCPoint per threshold; all thresholds share the same simulated paths."""
    trials = check_positive_int(trials, "trials", 2)
    b = _check_thresholds(thresholds)
    max_len_mrl = max_len_mrl or default_mrl_max_len(float(b[-1]))
    proc_inf = ChangePointProcess(pre, post, math.inf, seed)
    proc_nu = ChangePointProcess(pre, post, nu, seed)
    taus_inf = run_trials(detector, proc_inf, b, trials, max_len_mrl, seed, threads)
    taus_nu = run_trials(detector, proc_nu, b, trials, max_len_delay, seed, threads)
    rls = summarize_run_lengths(taus_inf, max_len_mrl)
    dls = summarize_delays(taus_nu, nu, max_len_delay)
    points = [
        OCPoint(name or detector.tag, float(bj), r.mean, r.se, d.mean, d.se, r.trunc_frac, trials,
                d.trunc_frac, d.premature_frac)
        for bj, r, d in zip(b, rls, dls)
    ]
    if return_taus:
        return points, taus_inf, taus_nu
    return points


def delay_curve(pre: DensityModel, post: DensityModel, detector: BaseDetector, thresholds, trials: int,
                nu: int, max_len: int = DELAY_MAX_LEN, seed: int = 0, threads: int = 1):
    """Delay estimates for every threshold at one change-point; returns (estimates, taus)."""
    b = _check_thresholds(thresholds)
    proc = ChangePointProcess(pre, post, nu, seed)
    taus = run_trials(detector, proc, b, trials, max_len, seed, threads)
    return summarize_delays(taus, int(nu), max_len), taus


def match_threshold(proc: ChangePointProcess, detector: BaseDetector, target_mrl: float, b_grid,
                    trials: int, max_len: int | None = None, seed: int = 0, threads: int = 1):
    """Grid threshold whose estimated mean run length is closest to ``target_mrl``
    (in log scale). All grid points share the same simulated paths.

    Returns ``(b, estimate_at_b, grid_estimates)``.
    """
    b = _check_thresholds(b_grid)
    max_len = max_len or int(50 * target_mrl)
    taus = run_trials(detector, _no_change(proc), b, trials, max_len, seed, threads)
    est = summarize_run_lengths(taus, max_len)
    gap = np.abs(np.log([e.mean for e in est]) - math.log(target_mrl))
    j = int(np.argmin(gap))
    return float(b[j]), est[j], est


def loo_log_products(x: np.ndarray, p0: DensityModel, rule, clip: ClipConfig = ClipConfig(),
                     estimator: DensityModel | None = None) -> np.ndarray:
    """log of prod_{i<=n} p_hat_{-i}^{n,1}(X_i) / p0(X_i) for n = 2..len(x); index n of the result.

    The bandwidth for the length-n prefix is ``rule`` evaluated at n.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    N, d = x.shape
    logp0 = p0.log_density(x)
    if estimator is not None:
        out = np.cumsum(estimator.log_density(x) - logp0)
        return np.concatenate([[np.nan], out])
    rule = as_rule(rule)
    inv_h = np.ones((N + 1, d))
    base = np.zeros(N + 1)
    for n in range(2, N + 1):
        h = np.broadcast_to(np.asarray(bandwidth_of(rule, n), dtype=np.float64), (d,))
        inv_h[n] = 1.0 / h
        base[n] = np.sum(np.log(h)) + 0.5 * d * LOG_2PI
    return _kernels.loo_log_products(x, logp0, inv_h, base, clip.log_floor, clip.log_ceiling)


def check_q(p0: DensityModel, m_values, rule, trials: int, seed: int = 0,
            clip: ClipConfig = ClipConfig(), estimator: DensityModel | None = None,
            threads: int = 1) -> ConditionReport:
    """Monte Carlo Q(m) = E_inf[max_{n=2..m} prod_{i=1}^n p_hat_{-i}^{n,1}(X_i) / p0(X_i)].

    One path of length max(m) per trial serves every m. The expectation is
    averaged with a max-shift in log space so large products cannot overflow.
    """
    m = np.asarray(sorted(set(int(v) for v in m_values)), dtype=np.int64)
    if m.size == 0 or m[0] < 2:
        raise ConfigError("every m must be >= 2")
    trials = check_positive_int(trials, "trials", 2)
    M = int(m[-1])

    def work(lo):
        hi = min(lo + TRIAL_CHUNK, trials)
        rows = []
        for t in range(lo, hi):
            proc = ChangePointProcess(p0, p0, math.inf, trial_seed(seed, t))
            lp = loo_log_products(proc.stream().take(M), p0, rule, clip, estimator)
            running = np.maximum.accumulate(lp[2:])
            rows.append(running[m - 2])
        return np.stack(rows)

    starts = range(0, trials, TRIAL_CHUNK)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            logmax = np.concatenate(list(pool.map(work, starts)))
    else:
        logmax = np.concatenate([work(lo) for lo in starts])

    shift = logmax.max(axis=0)
    scaled = np.exp(logmax - shift)
    q = np.exp(shift) * scaled.mean(axis=0)
    q_se = np.exp(shift) * scaled.std(axis=0, ddof=1) / math.sqrt(trials)
    return ConditionReport(m.astype(np.float64), q, q_se, trials)


@dataclass(frozen=True)
class DominanceReport:
    paths: int
    violations: int
    checked: int

    @property
    def ok(self) -> bool:
        return self.violations == 0


def _lengths(length, paths: int) -> np.ndarray:
    lengths = np.broadcast_to(np.asarray(length, dtype=np.int64), (paths,))
    if np.any(lengths < 1):
        raise ConfigError("path lengths must be positive")
    return lengths


def check_cusum_dominance(proc: ChangePointProcess, detector: NWLACuSum, b: float, paths: int,
                          length, seed: int = 0) -> DominanceReport:
    """Pathwise check that the non-reflected sum U_n never exceeds the NWLA
    statistic, hence crosses ``b`` no earlier (on paths where it crosses).

    ``length`` is one path length or one per path; path t uses the same seed
    as trial t of :func:`run_trials`.
    """
    lengths = _lengths(length, paths)
    w = int(detector.window)
    violations = checked = 0
    for t in range(paths):
        x = proc.with_seed(trial_seed(seed, t)).stream().take(int(lengths[t]))
        u = detector.cumulative_sum(x)
        wbar = detector.transform(x)
        checked += 1
        violations += int(np.any(u[w:] > wbar[w:]))
        tau_u = first_crossing(u, b, w)
        tau_bar = first_crossing(wbar, b, w)
        if tau_u is not None and (tau_bar is None or tau_u < tau_bar):
            violations += 1
    return DominanceReport(paths, violations, checked)


def check_sr_dominance(proc: ChangePointProcess, detector: NWLACuSum, paths: int, length,
                       seed: int = 0) -> DominanceReport:
    """Pathwise check R_n >= exp(W_bar(n)) for n > w, strict for n > w + 1.

    At n = w + 1 both recursions start from zero history and coincide.
    """
    lengths = _lengths(length, paths)
    sr = SRStatistic(**detector.get_params())
    w = int(detector.window)
    violations = checked = 0
    for t in range(paths):
        x = proc.with_seed(trial_seed(seed, t)).stream().take(int(lengths[t]))
        log_r = sr.transform(x)
        wbar = detector.transform(x)
        if len(x) <= w:
            continue
        checked += len(x) - w
        violations += int(log_r[w] < wbar[w])
        violations += int(np.sum(~(log_r[w + 1:] > wbar[w + 1:])))
    return DominanceReport(paths, violations, checked)
