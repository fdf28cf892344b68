"""Command line entry point ``qcd``.

Subcommands ``oc``, ``qcheck`` and ``kdeloss`` read a TOML experiment file
and write CSV tables (plus an SVG drawn from the CSV rows); ``solve`` prints
the design thresholds and windows for a target false-alarm rate.

Exit status: 0 on success, 1 for configuration errors, 2 for numerical
failures.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .density import BandwidthRule, ClipConfig, estimate_kl_loss, loglog_slope
from .exceptions import ConfigError, NumericalError
from .detectors import NWLACuSum
from .distributions import ChangePointProcess
from .harness import (
    DELAY_MAX_LEN,
    check_cusum_dominance,
    check_q,
    check_sr_dominance,
    default_mrl_max_len,
    delay_curve,
    oc_curve,
    trial_records,
)
from .policy import (
    kappa_star,
    nglr_window,
    nwla_threshold,
    nwla_window,
    parallel_threshold,
    rho_kappa,
    rho_star,
    solve_nglr_threshold,
)
from .svgplot import line_plot

logger = logging.getLogger("npqcd")

OC_COLUMNS = ["detector", "b", "mrl", "mrl_se", "delay", "delay_se", "trunc_frac", "trials"]
QCHECK_COLUMNS = ["series", "m", "q_estimate", "q_se", "margin"]
TRIAL_COLUMNS = ["detector", "b", "seed", "nu", "tau", "truncated"]
KDELOSS_COLUMNS = ["w", "h", "kl_loss", "kl_loss_se", "second_moment", "second_moment_se", "trials"]


class _Parser(argparse.ArgumentParser):
    # usage errors are configuration errors (exit 1), not numeric failures
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def write_csv(path: Path, columns: list[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_csv(path: Path) -> list[dict]:
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def _out_dir(args, cfg: dict) -> Path:
    if args.out is not None:
        return Path(args.out)
    return Path(cfg.get("output_dir", "."))


def _threads(args, cfg: dict) -> int:
    t = args.threads if args.threads is not None else cfg.get("threads", 1)
    if isinstance(t, bool) or not isinstance(t, int) or t < 1:
        raise ConfigError(f"threads must be a positive integer, got {t!r}")
    return t


def _positive_int(section: dict, key: str, where: str, default=None) -> int:
    v = section.get(key, default)
    if v is None:
        raise ConfigError(f"missing field '{where}.{key}'")
    if isinstance(v, bool) or not isinstance(v, int) or v < 1:
        raise ConfigError(f"'{where}.{key}' must be a positive integer, got {v!r}")
    return v


def _clip_of(section: dict) -> ClipConfig:
    try:
        return ClipConfig(section.get("clip_floor", 1e-12), section.get("clip_ceiling", math.inf))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def oc_svg(rows: list[dict]) -> str:
    series = defaultdict(lambda: ([], []))
    for r in rows:
        xs, ys = series[r["detector"]]
        xs.append(float(r["mrl"]))
        ys.append(float(r["delay"]))
    return line_plot(dict(series), title="Operating characteristic", xlabel="mean run length to false alarm",
                     ylabel="detection delay", logx=True)


def qcheck_svg(rows: list[dict]) -> str:
    series = defaultdict(lambda: ([], []))
    for r in rows:
        xs, ys = series[r["series"]]
        xs.append(float(r["m"]))
        ys.append(float(r["margin"]))
    return line_plot(dict(series), title="log Q(m) - 3 log m", xlabel="m", ylabel="margin", hline=0.0)


def kdeloss_svg(rows: list[dict]) -> str:
    rows = [r for r in rows if r["w"] != "slope"]
    xs = [float(r["w"]) for r in rows]
    ys = [math.log10(float(r["kl_loss"])) if float(r["kl_loss"]) > 0 else math.nan for r in rows]
    return line_plot({"KL loss": (xs, ys)}, title="KDE loss", xlabel="window w",
                     ylabel="log10 loss", logx=True)


def cmd_oc(args) -> int:
    path = Path(args.config)
    cfg = cfgmod.load(path)
    seed = cfgmod.resolve_seed(cfg, args.seed)
    threads = _threads(args, cfg)
    models = cfgmod.parse_models(cfg)
    oc = cfg.get("oc", {})
    pre = cfgmod.resolve_model(oc.get("pre", "pre"), models, "oc.pre")
    post = cfgmod.resolve_model(oc.get("post", "post"), models, "oc.post")
    if pre.dim != post.dim:
        raise ConfigError("pre- and post-change models differ in dimension")
    trials = _positive_int(oc, "trials", "oc")
    if trials < 2:
        raise ConfigError("'oc.trials' must be at least 2")
    nus = _nu_values(oc)
    diagnostics = bool(oc.get("diagnostics", False))
    max_len_delay = _positive_int(oc, "max_len_delay", "oc", DELAY_MAX_LEN)
    max_len_mrl = oc.get("max_len_mrl")
    if max_len_mrl is not None:
        max_len_mrl = _positive_int(oc, "max_len_mrl", "oc")
    specs = cfgmod.parse_detectors(cfg)
    out = _out_dir(args, cfg)

    rows, trial_rows = {nu: [] for nu in nus}, []
    for spec in specs:
        groups = defaultdict(list)
        for b, a in zip(spec.thresholds, spec.alphas):
            groups[spec.window_key(b, a)].append((b, a))
        for key, members in groups.items():
            b = [m[0] for m in members]
            detector = spec.build(pre, post, b[0], members[0][1])
            logger.info("oc: %s window=%s thresholds=%s", spec.name, key, b)
            points, taus_inf, taus_nu = oc_curve(
                pre, post, detector, b, trials, nu=nus[0], max_len_mrl=max_len_mrl,
                max_len_delay=max_len_delay, seed=seed, threads=threads, name=spec.name, return_taus=True)
            mrl_len = max_len_mrl or default_mrl_max_len(b[-1])
            delay_runs = [(nus[0], taus_nu)]
            for p in points:
                _check_point(spec.name, p.threshold, p.mrl, p.delay, p.delay_trunc_frac, p.premature_frac)
                rows[nus[0]].append([p.detector, p.threshold, p.mrl, p.mrl_se, p.delay, p.delay_se,
                                     p.trunc_frac, p.trials])
            for nu in nus[1:]:
                delays, taus = delay_curve(pre, post, detector, b, trials, nu, max_len_delay, seed, threads)
                delay_runs.append((nu, taus))
                for p, d in zip(points, delays):
                    _check_point(spec.name, p.threshold, p.mrl, d.mean, d.trunc_frac, d.premature_frac)
                    rows[nu].append([p.detector, p.threshold, p.mrl, p.mrl_se, d.mean, d.se,
                                     p.trunc_frac, p.trials])
            if diagnostics and isinstance(detector, NWLACuSum):
                _run_diagnostics(spec.name, pre, post, detector, b, taus_inf, mrl_len, delay_runs,
                                 max_len_delay, seed)
            if oc.get("write_trials", False):
                runs = [(taus_inf, math.inf, mrl_len)] + [(t, nu, max_len_delay) for nu, t in delay_runs]
                for taus, nu_v, ml in runs:
                    for r in trial_records(spec.name, nu_v, b, taus, ml, seed):
                        trial_rows.append([r.detector, r.threshold, r.seed, r.nu, r.tau, r.truncated])

    for i, nu in enumerate(nus):
        name = "oc_curve.csv" if i == 0 else f"oc_curve_nu{nu}.csv"
        write_csv(out / name, OC_COLUMNS, rows[nu])
        logger.info("wrote %s", out / name)
    if oc.get("write_trials", False):
        write_csv(out / "trials.csv", TRIAL_COLUMNS, trial_rows)
    if oc.get("svg", True):
        (out / "oc_curve.svg").write_text(oc_svg(read_csv(out / "oc_curve.csv")))
    return 0


def _nu_values(oc: dict) -> list[int]:
    nu = oc.get("nu", 1)
    nus = nu if isinstance(nu, list) else [nu]
    if not nus or any(isinstance(v, bool) or not isinstance(v, int) or v < 1 for v in nus):
        raise ConfigError(f"'oc.nu' must be a positive integer or a list of them, got {nu!r}")
    if len(set(nus)) != len(nus):
        raise ConfigError("'oc.nu' has repeated values")
    return nus


def _check_point(name, b, mrl, delay, trunc, premature) -> None:
    if premature == 1.0 and math.isnan(delay):
        logger.warning("%s b=%s: every trial alarmed before the change; delay is nan", name, b)
        return
    if not (math.isfinite(mrl) and math.isfinite(delay)):
        raise NumericalError(f"non-finite estimate for {name} at b={b}")
    if trunc > 0 or premature > 0:
        logger.info("%s b=%s: delay truncated %.3g, premature %.3g", name, b, trunc, premature)


def _run_diagnostics(name, pre, post, detector, b, taus_inf, mrl_len, delay_runs, max_len_delay, seed):
    """Replay every NWLA trial: SR dominance on MRL paths, U_n dominance on delay paths."""
    lengths = np.where(taus_inf[:, -1] < 0, mrl_len, taus_inf[:, -1])
    no_change = ChangePointProcess(pre, post, math.inf, seed)
    rep = check_sr_dominance(no_change, detector, len(lengths), lengths, seed)
    if not rep.ok:
        raise NumericalError(f"{name}: SR dominance violated at {rep.violations} of {rep.checked} steps")
    for nu, taus in delay_runs:
        lengths = np.where(taus[:, -1] < 0, max_len_delay, taus[:, -1])
        proc = ChangePointProcess(pre, post, nu, seed)
        rep = check_cusum_dominance(proc, detector, b[-1], len(lengths), lengths, seed)
        if not rep.ok:
            raise NumericalError(f"{name} nu={nu}: U_n dominance violated on {rep.violations} paths")
    logger.info("%s: dominance diagnostics passed", name)


def _m_values(section: dict) -> list[int]:
    if "m" in section:
        m = section["m"]
    elif "m_stop" in section:
        m = list(range(section.get("m_start", 2), section["m_stop"] + 1, section.get("m_step", 1)))
    else:
        raise ConfigError("qcheck needs 'm' or 'm_stop'")
    if not m or any(isinstance(v, bool) or not isinstance(v, int) or v < 2 for v in m):
        raise ConfigError(f"every m must be an integer >= 2, got {m!r}")
    return m


def cmd_qcheck(args) -> int:
    path = Path(args.config)
    cfg = cfgmod.load(path)
    seed = cfgmod.resolve_seed(cfg, args.seed)
    threads = _threads(args, cfg)
    models = cfgmod.parse_models(cfg)
    q = cfg.get("qcheck")
    if not isinstance(q, dict):
        raise ConfigError("missing table 'qcheck'")
    m = _m_values(q)
    trials = _positive_int(q, "trials", "qcheck")
    if trials < 2:
        raise ConfigError("'qcheck.trials' must be at least 2")
    series = q.get("series") or [{"name": "pre", "model": q.get("model", "pre"),
                                  "bandwidth": q.get("bandwidth")}]
    out = _out_dir(args, cfg)
    rows = []
    for i, s in enumerate(series):
        where = f"qcheck.series[{i}]"
        p0 = cfgmod.resolve_model(s.get("model", "pre"), models, where)
        if s.get("bandwidth") is None:
            raise ConfigError(f"missing field '{where}.bandwidth'")
        rule = BandwidthRule.from_config(s["bandwidth"])
        clip = _clip_of({**q, **s})
        logger.info("qcheck: %s", s.get("name", i))
        rep = check_q(p0, m, rule, trials, seed=seed, clip=clip, threads=threads)
        if not np.all(np.isfinite(rep.q)):
            raise NumericalError(f"non-finite Q(m) estimate in {where}")
        for mi, qi, se, mg in zip(rep.m, rep.q, rep.q_se, rep.margin):
            rows.append([s.get("name", f"series{i}"), int(mi), qi, se, mg])
    write_csv(out / "qcheck.csv", QCHECK_COLUMNS, rows)
    if q.get("svg", True):
        (out / "qcheck.svg").write_text(qcheck_svg(read_csv(out / "qcheck.csv")))
    return 0


def cmd_kdeloss(args) -> int:
    path = Path(args.config)
    cfg = cfgmod.load(path)
    seed = cfgmod.resolve_seed(cfg, args.seed)
    models = cfgmod.parse_models(cfg)
    k = cfg.get("kdeloss")
    if not isinstance(k, dict):
        raise ConfigError("missing table 'kdeloss'")
    model = cfgmod.resolve_model(k.get("model", "post"), models, "kdeloss.model")
    ws = k.get("w")
    if not ws or any(isinstance(v, bool) or not isinstance(v, int) or v < 2 for v in ws):
        raise ConfigError(f"'kdeloss.w' must list integers >= 2, got {ws!r}")
    trials = _positive_int(k, "trials", "kdeloss")
    rule = BandwidthRule.from_config(k.get("bandwidth", {"mode": "power", "c": 1.0, "exponent": 0.2}))
    clip = _clip_of(k)
    out = _out_dir(args, cfg)
    rows, losses, moments = [], [], []
    for w in sorted(ws):
        est = estimate_kl_loss(model, w, rule, clip, trials, seed)
        if not (math.isfinite(est.kl_loss) and math.isfinite(est.second_moment)):
            raise NumericalError(f"non-finite KL loss at w={w}")
        losses.append(est.kl_loss)
        moments.append(est.second_moment)
        rows.append([w, float(rule(w)), est.kl_loss, est.kl_loss_se, est.second_moment,
                     est.second_moment_se, est.trials])
    if len(ws) > 1:
        # least-squares slope of log moment on log w, in the moment columns
        slope = loglog_slope(sorted(ws), losses)
        rows.append(["slope", "", slope, "", loglog_slope(sorted(ws), moments), "", trials])
        logger.info("log-log slope of the KL loss: %.4f", slope)
    write_csv(out / "kdeloss.csv", KDELOSS_COLUMNS, rows)
    if k.get("svg", True):
        (out / "kdeloss.svg").write_text(kdeloss_svg(read_csv(out / "kdeloss.csv")))
    return 0


def cmd_solve(args) -> int:
    alpha = args.alpha
    gamma = args.gamma
    kappa = args.kappa if args.kappa is not None else kappa_star(gamma, args.dim)
    b = solve_nglr_threshold(alpha, args.varsigma)
    beta1 = 2.0 * gamma / (2.0 * gamma + args.dim)
    lines = [
        ("alpha", alpha),
        ("nglr_threshold", b),
        ("nwla_threshold", nwla_threshold(alpha)),
        ("parallel_threshold", parallel_threshold(alpha, args.max_window)),
        ("nglr_window", nglr_window(b, args.eta, args.divergence)),
        ("nwla_window", nwla_window(alpha, kappa)),
        ("kappa", kappa),
        ("kappa_star", kappa_star(gamma, args.dim)),
        ("rho_star", rho_star(gamma, args.dim)),
        ("rho_kappa", rho_kappa(kappa, beta1)),
    ]
    for key, v in lines:
        print(f"{key}={fmt(v)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qcd", description="Quickest change detection experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="progress messages on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads; never changes the output")
        p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    for name, fn, helptext in (("oc", cmd_oc, "operating-characteristic curves"),
                               ("qcheck", cmd_qcheck, "Monte Carlo check of the Q(m) condition"),
                               ("kdeloss", cmd_kdeloss, "KL loss of the window KDE")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("config", help="TOML experiment file")
        p.add_argument("--out", default=None, help="output directory (overrides output_dir)")
        common(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("solve", help="design thresholds and windows for a false-alarm rate")
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--varsigma", type=float, default=3.0)
    p.add_argument("--eta", type=float, default=1.5)
    p.add_argument("--divergence", type=float, default=0.125,
                   help="design KL divergence between post- and pre-change densities")
    p.add_argument("--gamma", type=float, default=2.0, help="Hölder smoothness of the post-change density")
    p.add_argument("--dim", type=int, default=1)
    p.add_argument("--kappa", type=float, default=None, help="NWLA window exponent (default: optimal)")
    p.add_argument("--max-window", type=int, default=50)
    common(p)
    p.set_defaults(func=cmd_solve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # usage errors exit 1; --help exits 0
        return int(exc.code or 0)
    logging.basicConfig(stream=sys.stderr, level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.threads is not None and args.threads < 1:
        print("qcd: error: --threads must be >= 1", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (NumericalError, FloatingPointError, OverflowError) as exc:
        print(f"qcd: numeric failure: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError, TypeError, KeyError) as exc:
        # malformed config values surface as one of these while parsing
        print(f"qcd: config error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
