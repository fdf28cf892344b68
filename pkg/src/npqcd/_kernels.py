"""Compiled inner loops for the detector statistics.

Every scan takes the full observation array ``x`` (n_samples, dim) plus a
``start`` index and returns the statistic for rows ``start:``. Rows before
``start`` only serve as window history, which makes the scans resumable on
block boundaries. Indices are 0-based here: row ``n`` is observation n+1.
"""

import math

import numpy as np
from numba import njit

_JIT = dict(cache=True, nogil=True)


@njit(**_JIT)
def reflected_sum(z, w_prev):
    """W(n) = max(W(n-1), 0) + z(n), starting from ``w_prev``."""
    out = np.empty(z.shape[0])
    w = w_prev
    for n in range(z.shape[0]):
        w = max(w, 0.0) + z[n]
        out[n] = w
    return out


@njit(**_JIT)
def gaussian_glr_scan(x, start, window, mean0, inv_var):
    """max over k in (n-window, n] of (sum_{i=k}^n (x_i - mean0))^2 / (2 var (n-k+1))."""
    n_obs = x.shape[0]
    out = np.empty(n_obs - start)
    for n in range(start, n_obs):
        lo = max(0, n - window + 1)
        s = 0.0
        best = -np.inf
        for k in range(n, lo - 1, -1):
            s += x[k] - mean0
            v = 0.5 * s * s * inv_var / (n - k + 1)
            if v > best:
                best = v
        out[n - start] = best
    return out


@njit(**_JIT)
def _kernel_term(x, a, b, inv_h):
    acc = 0.0
    for c in range(x.shape[1]):
        u = (x[a, c] - x[b, c]) * inv_h[c]
        acc += u * u
    return math.exp(-0.5 * acc)


@njit(**_JIT)
def _clip(v, log_floor, log_ceil):
    if v < log_floor:
        return log_floor
    if v > log_ceil:
        return log_ceil
    return v


@njit(**_JIT)
def wla_llr(x, logp0, start, w, inv_h, log_norm, log_floor, log_ceil):
    """Window-limited adaptive log-likelihood ratio.

    For row n >= w: log(p_hat(x_n) / p0(x_n)) with p_hat the KDE of rows
    n-w..n-1 (summed from n-1 backwards). Rows n < w get 0.
    """
    n_obs = x.shape[0]
    out = np.zeros(n_obs - start)
    for n in range(max(start, w), n_obs):
        s = 0.0
        for j in range(n - 1, n - w - 1, -1):
            s += _kernel_term(x, n, j, inv_h)
        lv = math.log(s) - log_norm if s > 0.0 else -np.inf
        out[n - start] = _clip(lv, log_floor, log_ceil) - logp0[n]
    return out


@njit(**_JIT)
def parallel_wla_scan(x, logp0, start, inv_h, log_norm, shared, log_floor, log_ceil, state):
    """Run one reflected WLA statistic per window size 1..W and return all of them.

    ``inv_h`` (W, dim) and ``log_norm`` (W,) hold the per-window bandwidth
    and normalization. When ``shared`` is true all windows use the same
    bandwidth and kernel values are accumulated once per step. ``state``
    (W,) carries the statistics in and is updated in place.
    """
    n_obs = x.shape[0]
    wmax = state.shape[0]
    out = np.empty((n_obs - start, wmax))
    for n in range(start, n_obs):
        s = 0.0
        for w in range(1, wmax + 1):
            z = 0.0
            if n >= w:
                if shared:
                    s += _kernel_term(x, n, n - w, inv_h[0])
                    sw = s
                else:
                    sw = 0.0
                    for j in range(n - 1, n - w - 1, -1):
                        sw += _kernel_term(x, n, j, inv_h[w - 1])
                lv = math.log(sw) - log_norm[w - 1] if sw > 0.0 else -np.inf
                z = _clip(lv, log_floor, log_ceil) - logp0[n]
            state[w - 1] = max(state[w - 1], 0.0) + z
            out[n - start, w - 1] = state[w - 1]
    return out


@njit(**_JIT)
def sr_log_recursion(z, first_active, log_r_prev):
    """log R_n for R_n = (1 + R_{n-1}) exp(z_n); R_n = 0 (log = -inf) before ``first_active``."""
    out = np.empty(z.shape[0])
    a = log_r_prev
    for n in range(z.shape[0]):
        if n < first_active:
            a = -np.inf
        else:
            # log(1 + exp(a)) without overflow
            if a > 0.0:
                lp = a + math.log1p(math.exp(-a))
            else:
                lp = math.log1p(math.exp(a))
            a = lp + z[n]
        out[n] = a
    return out


@njit(fastmath={'reassoc', 'contract', 'arcp', 'afn'}, **_JIT)
def nglr_scan(x, logp0, start, window, inv_h, log_norm_base, log_floor, log_ceil):
    """Non-parametric GLR statistic with leave-one-out KDE.

    For row n: max over k in (n-window, n-1] of
    sum_{i=k}^n [log p_hat_{-i}^{n,k}(x_i) - log p0(x_i)], where p_hat_{-i}^{n,k}
    is the KDE of rows k..n without row i. Row 0 gets 0 (no segment yet).

    Pairwise kernel values of the current window are kept in ``G`` with
    row/column ``n - lo`` for observation n, shifted by one when the window
    slides, so each step costs O(window^2) instead of a full rebuild.
    """
    n_obs = x.shape[0]
    m = window
    out = np.zeros(n_obs - start)
    G = np.zeros((m, m))
    S = np.zeros(m)
    lp = np.empty(m)
    lo = max(0, start - m + 1)
    for a in range(lo, start):
        for b in range(lo, a):
            g = _kernel_term(x, a, b, inv_h)
            G[a - lo, b - lo] = g
            G[b - lo, a - lo] = g
    for n in range(start, n_obs):
        new_lo = max(0, n - m + 1)
        if new_lo > lo:
            # slide the window by one observation
            G[: m - 1, : m - 1] = G[1:, 1:]
            lo = new_lo
        r = n - lo
        for j in range(lo, n):
            g = _kernel_term(x, n, j, inv_h)
            G[r, j - lo] = g
            G[j - lo, r] = g
        if n == 0:
            continue
        for i in range(r + 1):
            lp[i] = logp0[lo + i]
        S[r] = 0.0
        best = -np.inf
        for rk in range(r - 1, -1, -1):
            row = G[rk]
            sk = 0.0
            for i in range(rk + 1, r + 1):
                g = row[i]
                S[i] += g
                sk += g
            S[rk] = sk
            const = -math.log(r - rk) - log_norm_base
            total = 0.0
            for i in range(rk, r + 1):
                si = S[i]
                lv = math.log(si) + const if si > 0.0 else -np.inf
                if lv < log_floor:
                    lv = log_floor
                elif lv > log_ceil:
                    lv = log_ceil
                total += lv - lp[i]
            if total > best:
                best = total
        out[n - start] = best
    return out


@njit(**_JIT)
def loo_log_products(x, logp0, inv_h, log_norm_base, log_floor, log_ceil):
    """For each prefix length n = 2..N: sum_{i<n} log(p_hat_{-i}^{n}(x_i) / p0(x_i)).

    ``inv_h[n]`` and ``log_norm_base[n]`` give the bandwidth used for the
    prefix of length n. Entry 0 and 1 of the result are unused (set to nan).
    """
    N = x.shape[0]
    out = np.full(N + 1, np.nan)
    S = np.zeros(N)
    for n in range(2, N + 1):
        for i in range(n):
            S[i] = 0.0
        for a in range(n):
            for b in range(a):
                g = _kernel_term(x, a, b, inv_h[n])
                S[a] += g
                S[b] += g
        const = -math.log(n - 1) - log_norm_base[n]
        total = 0.0
        for i in range(n):
            lv = math.log(S[i]) + const if S[i] > 0.0 else -np.inf
            total += _clip(lv, log_floor, log_ceil) - logp0[i]
        out[n] = total
    return out
