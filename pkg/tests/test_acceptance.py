"""Exit criteria at desk scale. Each test prints one pass/fail line.

Run just these with ``pytest -m acceptance -s``.
"""

import math
import os
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

import oracles
from npqcd.cli import main
from npqcd.density import BandwidthRule, estimate_kl_loss, kde_eval, kde_eval_loo, loglog_slope
from npqcd.detectors import CuSum, GaussianGLRCuSum, NGLRCuSum, NWLACuSum, ParallelNWLACuSum, SRStatistic
from npqcd.distributions import ChangePointProcess, DensityModel, sample_path, trial_seed
from npqcd.harness import (
    check_q,
    estimate_delay,
    match_threshold,
    run_trials,
    summarize_delays,
    summarize_run_lengths,
)
from npqcd.policy import kappa_star, rho_star, solve_nglr_threshold

pytestmark = pytest.mark.acceptance

N01 = DensityModel.gaussian(0.0, 1.0)
N05 = DensityModel.gaussian(0.5, 1.0)
THREADS = os.cpu_count() or 1
SMOKE = Path(__file__).resolve().parent.parent / "configs" / "smoke"


def test_nwla_mean_run_length_lower_bound(report):
    t0 = time.perf_counter()
    w = 20
    det = NWLACuSum(N01, window=w, bandwidth=BandwidthRule.power(1.0, 0.2))
    b = [2.0, 3.0, 4.0]
    max_len = int(50 * math.exp(b[-1]))
    taus = run_trials(det, ChangePointProcess(N01, N01), b, 2000, max_len, seed=101, threads=THREADS)
    est = summarize_run_lengths(taus, max_len)
    elapsed = time.perf_counter() - t0
    bounds = [e.mean >= math.exp(bj) - 2 * e.se for bj, e in zip(b, est)]
    ok = all(bounds) and elapsed < 120
    detail = ", ".join(f"b={bj:g}: MRL {e.mean:.1f}+-{e.se:.1f} vs e^b {math.exp(bj):.1f} (trunc {e.trunc_frac:.3f})"
                       for bj, e in zip(b, est))
    report(1, ok, f"NWLA w=20 {detail}; {elapsed:.1f}s")
    assert ok


def test_cusum_delay_slope(report):
    t0 = time.perf_counter()
    b = [4.0, 6.0, 8.0, 10.0]
    taus = run_trials(CuSum(N01, N05), ChangePointProcess(N01, N05, 1), b, 5000, 10_000, seed=202,
                      threads=THREADS)
    delays = summarize_delays(taus, 1, 10_000)
    slope = float(np.polyfit(b, [d.mean for d in delays], 1)[0])
    elapsed = time.perf_counter() - t0
    ok = abs(slope - 8.0) <= 0.15 * 8.0 and elapsed < 120
    means = ", ".join(f"{d.mean:.2f}" for d in delays)
    report(2, ok, f"delays [{means}] slope {slope:.3f} (target 8 +-15%); {elapsed:.1f}s")
    assert ok


def _matched(det, coarse, target=3000.0, seed=0):
    """Threshold with mean run length near ``target``: a 100-trial pilot on a
    coarse grid, then 1000 trials on a fine grid around the interpolated point."""
    proc = ChangePointProcess(N01, N05)
    pilot = run_trials(det, proc, coarse, 100, int(10 * target), seed=seed + 1, threads=THREADS)
    logm = np.log([e.mean for e in summarize_run_lengths(pilot, int(10 * target))])
    b_star = float(np.interp(math.log(target), np.maximum.accumulate(logm), coarse))
    fine = np.round(np.arange(b_star - 0.25, b_star + 0.2501, 0.025), 6)
    b, mrl, _ = match_threshold(proc, det, target, fine, 1000, seed=seed + 2, threads=THREADS)
    delay = estimate_delay(ChangePointProcess(N01, N05, 1), det, b, 1000, seed=seed + 3, threads=THREADS)
    return b, mrl, delay


def test_delay_ordering_at_matched_run_length(report):
    t0 = time.perf_counter()
    dets = {
        "CuSum": (CuSum(N01, N05), np.arange(5.0, 10.01, 0.5)),
        "GLR": (GaussianGLRCuSum(window=40), np.arange(6.0, 10.51, 0.5)),
        "NGLR": (NGLRCuSum(N01, window=40, bandwidth=10 ** -0.2), np.arange(6.0, 9.51, 0.5)),
    }
    res = {name: _matched(det, grid, seed=300 + 10 * i) for i, (name, (det, grid)) in enumerate(dets.items())}
    elapsed = time.perf_counter() - t0

    def le(a, b):
        da, db = res[a][2], res[b][2]
        return da.mean <= db.mean + 2 * math.hypot(da.se, db.se)

    matched = all(abs(math.log(r[1].mean / 3000.0)) < 0.1 for r in res.values())
    ok = le("CuSum", "GLR") and le("GLR", "NGLR") and matched and elapsed < 600
    detail = "; ".join(f"{k}: b={b:.3f} MRL {m.mean:.0f}+-{m.se:.0f} delay {d.mean:.2f}+-{d.se:.2f}"
                       for k, (b, m, d) in res.items())
    report(3, ok, f"{detail}; {elapsed:.1f}s")
    assert ok


def test_condition_check_margin_negative(report):
    t0 = time.perf_counter()
    m = list(range(5, 51, 5))
    rep = check_q(N01, m, BandwidthRule.power(1.0, 0.2), trials=10_000, seed=404, threads=THREADS)
    elapsed = time.perf_counter() - t0
    ok = bool(np.all(rep.margin < 0)) and elapsed < 300
    report(4, ok, f"max margin {rep.margin.max():.3f} over m=5..50 "
                  f"(margins {np.array2string(rep.margin, precision=2)}); {elapsed:.1f}s")
    assert ok


def test_oracle_equivalences(report):
    h = 10 ** -0.2
    # (a) NGLR streaming statistic against brute force on random 60-sample prefixes
    rng = np.random.default_rng(505)
    worst_a = 0.0
    for t in range(200):
        n = int(rng.integers(2, 61))
        x = sample_path(ChangePointProcess(N01, N05, int(rng.integers(1, 61)), trial_seed(505, t)), n)[:, 0]
        det = NGLRCuSum(N01, window=20, bandwidth=h).reset()
        for v in x:
            stat, _ = det.update(v)
        worst_a = max(worst_a, abs(stat - oracles.nglr_final(list(x), 20, h, floor=1e-12)))
    # (b) closed-form Gaussian GLR against a theta grid
    thetas = np.arange(-5000, 5001) * 1e-3
    worst_b = 0.0
    for _ in range(100):
        x = rng.normal(rng.uniform(-1, 1), 1.0, size=int(rng.integers(1, 40)))
        worst_b = max(worst_b, np.max(np.abs(GaussianGLRCuSum(window=20).transform(x)
                                             - oracles.glr_grid(x, 20, thetas))))
    # (c) parallel NWLA against independently run per-window detectors
    exact_c = True
    for t, bw in enumerate([None, 0.6]):
        x = sample_path(ChangePointProcess(N01, N05, 100, t), 300)
        par = ParallelNWLACuSum(N01, max_window=25, bandwidth=bw).transform(x)
        singles = np.max([NWLACuSum(N01, window=w, bandwidth=bw).transform(x) for w in range(1, 26)], axis=0)
        exact_c &= bool(np.array_equal(par, singles))
    # (d) leave-one-out evaluation against the reduced window
    worst_d = 0.0
    for _ in range(100):
        w = int(rng.integers(2, 30))
        window = rng.normal(size=w)
        i = int(rng.integers(w))
        x, hh = rng.normal(), rng.uniform(0.1, 2.0)
        worst_d = max(worst_d, abs(kde_eval_loo(window, i, hh, x) - kde_eval(np.delete(window, i), hh, x)))
    ok = worst_a < 1e-10 and worst_b < 1e-5 and exact_c and worst_d < 1e-12
    report(5, ok, f"(a) {worst_a:.2e} (b) {worst_b:.2e} (c) exact={exact_c} (d) {worst_d:.2e}")
    assert ok


def test_pathwise_dominance(report):
    w, b = 20, 5.0
    det = NWLACuSum(N01, window=w)
    # reflected statistic dominates the plain sum U_n, so tau_u >= tau_bar
    post = ChangePointProcess(N01, N05, 1)
    cusum_bad = 0
    for t in range(500):
        x = sample_path(post.with_seed(trial_seed(606, t)), 2000)
        u, wbar = det.cumulative_sum(x), det.transform(x)
        hit_u = np.flatnonzero(u[w:] >= b)
        hit_w = np.flatnonzero(wbar[w:] >= b)
        if hit_u.size and (not hit_w.size or hit_u[0] < hit_w[0]):
            cusum_bad += 1
    # R_n > exp(W_bar(n)) at every n > w on pre-change paths, compared in log space
    sr = SRStatistic(N01, window=w)
    pre = ChangePointProcess(N01, N01)
    strict_bad_paths = 0
    first_step_ties = later_bad = 0
    for t in range(500):
        x = sample_path(pre.with_seed(trial_seed(607, t)), 1000)
        log_r, wbar = sr.transform(x), det.transform(x)
        bad = ~(log_r[w:] > wbar[w:])
        strict_bad_paths += int(bad.any())
        first_step_ties += int(log_r[w] == wbar[w])
        later_bad += int(bad[1:].sum())
    ok = cusum_bad == 0 and strict_bad_paths == 0
    report(6, ok, f"tau_u >= tau_bar violations {cusum_bad}/500; strict R_n > e^W violations on "
                  f"{strict_bad_paths}/500 paths (ties at n=w+1: {first_step_ties}, "
                  f"violations at n>w+1: {later_bad})")
    assert ok


def test_kde_loss_decay(report):
    t0 = time.perf_counter()
    ws = [25, 100, 400]
    est = [estimate_kl_loss(N01, w, BandwidthRule.power(1.0, 0.2), trials=20_000, seed=707 + i)
           for i, w in enumerate(ws)]
    losses = [e.kl_loss for e in est]
    sep = [est[i].kl_loss - est[i + 1].kl_loss > 3 * math.hypot(est[i].kl_loss_se, est[i + 1].kl_loss_se)
           for i in range(len(ws) - 1)]
    slope = loglog_slope(ws, losses)
    elapsed = time.perf_counter() - t0
    ok = all(sep) and slope < 0 and elapsed < 120
    detail = ", ".join(f"w={w}: {e.kl_loss:.5f}+-{e.kl_loss_se:.5f}" for w, e in zip(ws, est))
    report(7, ok, f"{detail}; slope {slope:.3f}; {elapsed:.1f}s")
    assert ok


def test_policy_solver(report):
    worst = 0.0
    for alpha in np.logspace(-12, -0.5, 25):
        for varsigma in np.linspace(0.0, 8.0, 17):
            b = solve_nglr_threshold(alpha, varsigma)
            worst = max(worst, abs(b - varsigma * math.log(b) - (abs(math.log(alpha)) + math.log(8))))
    closed = max(abs(solve_nglr_threshold(a, 0.0) - (abs(math.log(a)) + math.log(8)))
                 for a in np.logspace(-12, -0.5, 25))
    exact = kappa_star(2.0, 1) == float(Fraction(5, 9)) and rho_star(2.0, 1) == float(Fraction(4, 9))
    ok = worst < 1e-9 and closed < 1e-12 and exact
    report(8, ok, f"max residual {worst:.2e}, closed-form gap {closed:.2e}, kappa*=5/9 rho*=4/9 exact={exact}")
    assert ok


def test_reproducibility(report, tmp_path, capsys):
    same = {}
    for cmd in ("oc", "qcheck", "kdeloss"):
        outs = []
        for run, threads in enumerate((1, 1, 4)):
            out = tmp_path / f"{cmd}{run}"
            assert main([cmd, str(SMOKE / f"{cmd}.toml"), "--out", str(out), "--threads", str(threads)]) == 0
            outs.append(sorted((p.name, p.read_bytes()) for p in out.glob("*.csv")))
        same[cmd] = outs[0] == outs[1] == outs[2]
    printed = []
    for threads in (1, 4):
        main(["solve", "--alpha", "0.001", "--threads", str(threads)])
        printed.append(capsys.readouterr().out)
    same["solve"] = printed[0] == printed[1]
    ok = all(same.values())
    report(9, ok, "byte-identical across reruns and thread counts: "
                  + ", ".join(f"{k}={v}" for k, v in same.items()))
    assert ok
