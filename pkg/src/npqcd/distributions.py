"""Pre/post-change density models, likelihood ratios, KL divergences and
seeded change-point streams.

Only diagonal-covariance Gaussians and finite mixtures of them are supported.
A plain Gaussian is a one-component mixture, so every model shares a single
code path for evaluation and sampling.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy.special import logsumexp

from .exceptions import ConfigError, NumericalError
from .validation import check_positive_int, check_stream

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)

# Samples are always drawn in blocks of this many observations, so a path
# depends only on its seed and never on how callers chunk their requests.
SAMPLE_BLOCK = 256


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class DensityModel:
    """Finite mixture of diagonal-covariance Gaussians on R^d.

    Parameters
    ----------
    means, variances : array of shape (n_components, dim)
    weights : array of shape (n_components,)
        Mixture weights; must sum to one.
    """

    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray
    kind: str = field(default="gaussian_mixture")

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        variances = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        weights = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        if means.shape != variances.shape:
            raise ConfigError(f"means {means.shape} and variances {variances.shape} differ in shape")
        if weights.shape != (means.shape[0],):
            raise ConfigError(f"need {means.shape[0]} mixture weights, got {weights.shape[0]}")
        if not (np.all(np.isfinite(means)) and np.all(np.isfinite(variances))):
            raise ConfigError("model parameters must be finite")
        if np.any(variances <= 0):
            raise ConfigError("variances must be strictly positive")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ConfigError(f"mixture weights must be nonnegative and sum to 1, got {weights.tolist()}")
        if self.kind not in ("gaussian", "gaussian_mixture"):
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.kind == "gaussian" and means.shape[0] != 1:
            raise ConfigError("a 'gaussian' model has exactly one component")
        object.__setattr__(self, "means", _frozen(means))
        object.__setattr__(self, "variances", _frozen(variances))
        object.__setattr__(self, "weights", _frozen(weights))

    @classmethod
    def gaussian(cls, mean=0.0, variance=1.0) -> "DensityModel":
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        variance = np.broadcast_to(np.asarray(variance, dtype=np.float64), mean.shape)
        return cls(mean[None, :], variance[None, :], [1.0], kind="gaussian")

    @classmethod
    def mixture(cls, means, variances, weights) -> "DensityModel":
        means = np.asarray(means, dtype=np.float64)
        if means.ndim == 1:
            means = means[:, None]
        variances = np.broadcast_to(np.asarray(variances, dtype=np.float64).reshape(len(means), -1), means.shape)
        return cls(means, variances, weights, kind="gaussian_mixture")

    @classmethod
    def from_config(cls, cfg: dict) -> "DensityModel":
        """Build from a config fragment with keys kind, means, variances, weights, dim."""
        try:
            kind = cfg.get("kind", "gaussian")
            dim = int(cfg.get("dim", 1))
            means = np.asarray(cfg["means"], dtype=np.float64).reshape(-1, dim)
            variances = np.asarray(cfg["variances"], dtype=np.float64).reshape(-1, dim)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad model fragment {cfg!r}: {exc}") from exc
        weights = cfg.get("weights", [1.0 / len(means)] * len(means))
        return cls(means, variances, weights, kind=kind)

    def to_config(self) -> dict:
        return {
            "kind": self.kind,
            "dim": self.dim,
            "means": self.means.ravel().tolist(),
            "variances": self.variances.ravel().tolist(),
            "weights": self.weights.tolist(),
        }

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def is_gaussian(self) -> bool:
        return self.n_components == 1

    def log_density(self, X) -> np.ndarray:
        """Log-density at each row of ``X`` (shape (n, dim)); returns shape (n,)."""
        X = check_stream(X, self.dim)
        diff = X[:, None, :] - self.means[None, :, :]
        comp = -0.5 * np.sum(diff**2 / self.variances + np.log(self.variances) + LOG_2PI, axis=2)
        if self.is_gaussian:
            return comp[:, 0]
        with np.errstate(divide="ignore"):
            return logsumexp(comp + np.log(self.weights), axis=1)

    def pdf(self, X) -> np.ndarray:
        return np.exp(self.log_density(X))

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def std(self) -> np.ndarray:
        m = self.mean()
        second = self.weights @ (self.variances + self.means**2)
        return np.sqrt(second - m**2)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Draw ``n`` i.i.d. observations, shape (n, dim)."""
        if self.is_gaussian:
            comp = np.zeros(n, dtype=np.intp)
        else:
            comp = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.sqrt(self.variances[comp]) * z

    def __repr__(self):
        if self.is_gaussian and self.dim == 1:
            return f"N({self.means[0, 0]:g}, {self.variances[0, 0]:g})"
        return f"DensityModel(kind={self.kind!r}, K={self.n_components}, dim={self.dim})"


def log_density(model: DensityModel, x) -> float:
    """Log-density of a single point."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if not np.all(np.isfinite(x)):
        raise ValueError(f"observation must be finite, got {x}")
    return float(model.log_density(x.reshape(1, -1))[0])


def log_likelihood_ratio(x, p0: DensityModel, p1: DensityModel):
    """log p1(x) - log p0(x); vectorized over rows when ``x`` is 2-D."""
    if p0.dim != p1.dim:
        raise ValueError(f"dimension mismatch: p0 has dim {p0.dim}, p1 has dim {p1.dim}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2 or (x.ndim == 1 and p0.dim == 1 and x.size > 1):
        return p1.log_density(x) - p0.log_density(x)
    return log_density(p1, x) - log_density(p0, x)


def _gaussian_kl(p: DensityModel, q: DensityModel) -> float:
    vp, vq = p.variances[0], q.variances[0]
    dm = q.means[0] - p.means[0]
    return float(0.5 * np.sum(vp / vq + dm**2 / vq - 1.0 + np.log(vq / vp)))


def kl_divergence_mc(p: DensityModel, q: DensityModel, n: int = 200_000, seed: int = 0):
    """Monte Carlo KL(p || q) with its standard error."""
    rng = np.random.default_rng(seed)
    X = p.sample(rng, n)
    r = p.log_density(X) - q.log_density(X)
    return float(r.mean()), float(r.std(ddof=1) / math.sqrt(n))


def kl_divergence(p: DensityModel, q: DensityModel, rtol: float = 1e-8) -> float:
    """KL(p || q).

    Closed form for two Gaussians, adaptive quadrature for univariate
    mixtures, and Monte Carlo otherwise (its standard error is logged).
    """
    if p.dim != q.dim:
        raise ValueError("dimension mismatch")
    if p.is_gaussian and q.is_gaussian:
        return max(_gaussian_kl(p, q), 0.0)
    if p.dim > 1:
        value, se = kl_divergence_mc(p, q)
        logger.info("Monte Carlo KL estimate %.6g (se %.2g)", value, se)
        return max(value, 0.0)

    sd = np.sqrt(p.variances[:, 0])
    lo = float(np.min(p.means[:, 0] - 12 * sd))
    hi = float(np.max(p.means[:, 0] + 12 * sd))
    breaks = sorted(set(np.clip(p.means[:, 0], lo, hi).tolist()))

    def integrand(t):
        x = np.array([[t]])
        lp = p.log_density(x)[0]
        return math.exp(lp) * (lp - q.log_density(x)[0])

    out = integrate.quad(integrand, lo, hi, points=breaks, epsrel=rtol, epsabs=0.0, limit=500, full_output=1)
    value, abserr, info = out[0], out[1], out[2]
    if len(out) > 3:
        raise NumericalError(
            f"KL quadrature did not converge on [{lo:.3g}, {hi:.3g}]: {out[3]} "
            f"(estimate {value:.6g}, abs err {abserr:.2g}, {info['neval']} evaluations)"
        )
    return max(float(value), 0.0)


def trial_seed(master_seed: int, trial: int, stream: int = 0) -> int:
    """64-bit seed for one Monte Carlo trial, derived from (master, stream, trial)."""
    ss = np.random.SeedSequence([int(master_seed), int(stream), int(trial)])
    return int(ss.generate_state(1, np.uint64)[0])


class _ModelStream:
    # sequential i.i.d. draws from one model, generated in fixed-size blocks
    def __init__(self, model: DensityModel, seed_seq: np.random.SeedSequence):
        self.model = model
        self.rng = np.random.Generator(np.random.Philox(seed_seq))
        self._buf = np.empty((0, model.dim))

    def take(self, n: int) -> np.ndarray:
        if n <= 0:
            return np.empty((0, self.model.dim))
        while len(self._buf) < n:
            k = -(-(n - len(self._buf)) // SAMPLE_BLOCK)
            blocks = [self.model.sample(self.rng, SAMPLE_BLOCK) for _ in range(k)]
            self._buf = np.concatenate([self._buf, *blocks])
        out, self._buf = self._buf[:n], self._buf[n:]
        return out


@dataclass(frozen=True)
class ChangePointProcess:
    """Independent observations with density ``pre`` before index ``nu`` and
    ``post`` from index ``nu`` on (indices start at 1). ``nu=math.inf`` means
    the change never happens."""

    pre: DensityModel
    post: DensityModel
    nu: float = math.inf
    seed: int = 0

    def __post_init__(self):
        if self.pre.dim != self.post.dim:
            raise ConfigError("pre- and post-change models must share a dimension")
        if not (self.nu == math.inf or (float(self.nu).is_integer() and self.nu >= 1)):
            raise ConfigError(f"change-point must be an integer >= 1 or inf, got {self.nu}")

    @property
    def dim(self) -> int:
        return self.pre.dim

    def with_seed(self, seed: int) -> "ChangePointProcess":
        return ChangePointProcess(self.pre, self.post, self.nu, seed)

    def stream(self) -> "PathStream":
        return PathStream(self)


class PathStream:
    """Incremental sampler for one path of a :class:`ChangePointProcess`.

    Pre- and post-change observations come from two independent child
    streams, so the pre-change prefix of a path is the same for every ``nu``.
    """

    def __init__(self, proc: ChangePointProcess):
        self.proc = proc
        pre_ss, post_ss = np.random.SeedSequence(int(proc.seed)).spawn(2)
        self._pre = _ModelStream(proc.pre, pre_ss)
        self._post = _ModelStream(proc.post, post_ss)
        self.position = 0

    def take(self, n: int) -> np.ndarray:
        lo, hi = self.position, self.position + n
        n_pre = int(min(hi, max(lo, self.proc.nu - 1))) - lo if self.proc.nu != math.inf else n
        parts = [self._pre.take(n_pre), self._post.take(n - n_pre)]
        self.position = hi
        return np.concatenate(parts)


def sample_path(proc: ChangePointProcess, n: int) -> np.ndarray:
    """First ``n`` observations of the process, shape (n, dim)."""
    n = check_positive_int(n, "n")
    return PathStream(proc).take(n)
