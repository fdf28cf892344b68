"""Experiment configuration files (TOML) and detector construction."""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .density import BandwidthRule, ClipConfig
from .detectors import CuSum, GaussianGLRCuSum, NGLRCuSum, NWLACuSum, ParallelNWLACuSum
from .distributions import DensityModel
from .exceptions import ConfigError
from .policy import ThresholdPolicy, WindowPolicy

ALGORITHMS = ("cusum", "glr", "nglr", "nwla", "parallel_nwla")


def load(path) -> dict:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _require(cfg: dict, key: str, where: str):
    if key not in cfg:
        raise ConfigError(f"missing field '{where}.{key}'" if where else f"missing field '{key}'")
    return cfg[key]


def resolve_seed(cfg: dict, override: int | None) -> int:
    seed = override if override is not None else cfg.get("seed")
    if seed is None:
        raise ConfigError("missing field 'seed' (no default seed is used)")
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"'seed' must be a nonnegative integer, got {seed!r}")
    return seed


def resolve_model(ref, models: dict, where: str) -> DensityModel:
    if isinstance(ref, str):
        if ref not in models:
            raise ConfigError(f"{where}: unknown model reference {ref!r}")
        return models[ref]
    if isinstance(ref, dict):
        return DensityModel.from_config(ref)
    raise ConfigError(f"{where}: model must be a name or a table")


def parse_models(cfg: dict) -> dict[str, DensityModel]:
    out = {}
    for name, frag in cfg.get("models", {}).items():
        if not isinstance(frag, dict):
            raise ConfigError(f"models.{name} must be a table")
        try:
            out[name] = DensityModel.from_config(frag)
        except ConfigError as exc:
            raise ConfigError(f"models.{name}: {exc}") from exc
    return out


@dataclass
class DetectorSpec:
    """One configured detector: how to build it for a given threshold."""

    name: str
    algorithm: str
    params: dict
    thresholds: list[float]
    alphas: list[float | None] = field(default_factory=list)
    window_policy: WindowPolicy | None = None

    def build(self, pre: DensityModel, post: DensityModel, b: float, alpha: float | None = None):
        p = dict(self.params)
        if self.algorithm in ("nglr", "nwla") and "window" not in p:
            p["window"] = (self.window_policy.nglr(b) if self.algorithm == "nglr"
                           else self.window_policy.nwla(alpha))
        if self.algorithm == "cusum":
            return CuSum(pre, post)
        if self.algorithm == "glr":
            if not pre.is_gaussian or pre.dim != 1:
                raise ConfigError(f"detector {self.name!r}: glr needs a univariate Gaussian pre-change model")
            return GaussianGLRCuSum(p.get("window", 100), float(pre.means[0, 0]),
                                    float(math.sqrt(pre.variances[0, 0])))
        common = dict(clip_floor=p.get("clip_floor", 1e-12), clip_ceiling=p.get("clip_ceiling", math.inf))
        if self.algorithm == "nglr":
            return NGLRCuSum(pre, p["window"], p.get("bandwidth", 10 ** -0.2), **common)
        if self.algorithm == "nwla":
            return NWLACuSum(pre, p["window"], p.get("bandwidth"), **common)
        return ParallelNWLACuSum(pre, p.get("max_window", 50), p.get("bandwidth"), **common)

    def window_key(self, b: float, alpha: float | None):
        if self.algorithm == "nglr" and "window" not in self.params:
            return self.window_policy.nglr(b)
        if self.algorithm == "nwla" and "window" not in self.params:
            return self.window_policy.nwla(alpha)
        return None


def parse_detector(frag: dict, i: int) -> DetectorSpec:
    where = f"detectors[{i}]"
    if not isinstance(frag, dict):
        raise ConfigError(f"{where} must be a table")
    algorithm = _require(frag, "algorithm", where)
    if algorithm not in ALGORITHMS:
        raise ConfigError(f"{where}.algorithm must be one of {ALGORITHMS}, got {algorithm!r}")
    name = frag.get("name", algorithm)
    params = {}
    for key in ("window", "max_window", "clip_floor", "clip_ceiling"):
        if key in frag:
            params[key] = frag[key]
    if "bandwidth" in frag:
        try:
            params["bandwidth"] = BandwidthRule.from_config(frag["bandwidth"])
        except (ConfigError, TypeError, AttributeError) as exc:
            raise ConfigError(f"{where}.bandwidth: {exc}") from exc
    if "clip_floor" in params or "clip_ceiling" in params:
        ClipConfig(params.get("clip_floor", 1e-12), params.get("clip_ceiling", math.inf))

    window_policy = None
    if algorithm in ("nglr", "nwla") and "window" not in params:
        wp = frag.get("window_policy")
        if not isinstance(wp, dict):
            raise ConfigError(f"{where}: give 'window' or a 'window_policy' table")
        window_policy = WindowPolicy(eta=wp.get("eta", 1.5), divergence=wp.get("divergence"),
                                     kappa=wp.get("kappa"))

    if "thresholds" in frag:
        thresholds = [float(b) for b in frag["thresholds"]]
        alphas = [None] * len(thresholds)
    elif "alphas" in frag:
        tp = frag.get("threshold_policy", {})
        policy = ThresholdPolicy(mode=tp.get("mode", "direct"), varsigma=tp.get("varsigma", 3.0),
                                 max_window=tp.get("max_window", params.get("max_window", 1)))
        alphas = [float(a) for a in frag["alphas"]]
        thresholds = [policy.threshold(a) for a in alphas]
    else:
        raise ConfigError(f"{where}: give 'thresholds' or 'alphas'")
    if not thresholds:
        raise ConfigError(f"{where}: threshold list is empty")
    order = sorted(range(len(thresholds)), key=lambda j: thresholds[j])
    spec = DetectorSpec(name, algorithm, params, [thresholds[j] for j in order],
                        [alphas[j] for j in order], window_policy)
    # fail early on invalid windows
    for b, a in zip(spec.thresholds, spec.alphas):
        spec.window_key(b, a)
    return spec


def parse_detectors(cfg: dict) -> list[DetectorSpec]:
    frags = cfg.get("detectors", [])
    if not isinstance(frags, list) or not frags:
        raise ConfigError("'detectors' must be a non-empty list of tables")
    specs = [parse_detector(f, i) for i, f in enumerate(frags)]
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ConfigError(f"detector names must be unique, got {names}")
    return specs
