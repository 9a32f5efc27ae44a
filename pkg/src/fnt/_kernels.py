"""Hot dynamic-programming kernels for the alignment-lattice losses.

Two implementations are provided for each recursion:

* a scalar-loop version compiled with numba ``@njit`` (the default), and
* a pure-numpy version that vectorizes across anti-diagonals / label states.

The active path is chosen at import time: numba is used when importable
unless the environment variable ``FNT_NUMBA`` is ``0``/``false``/``off``.
``benchmarks/bench_kernels.py`` times the two paths against each other, and
the test suite asserts they agree to machine precision.

All kernels work on float64 arrays; callers up-cast as needed.  Log-domain
recursions use a max-shifted logaddexp so -inf never poisons a cell.
"""

from __future__ import annotations

import math
import os

import numpy as np

__all__ = [
    "USE_NUMBA",
    "transducer_alpha",
    "transducer_beta",
    "ctc_alpha",
    "ctc_beta",
    "transducer_alpha_py",
    "transducer_beta_py",
    "ctc_alpha_py",
    "ctc_beta_py",
]

NEG_INF = -np.inf


def _numba_requested() -> bool:
    return os.environ.get("FNT_NUMBA", "1").strip().lower() not in ("0", "false", "off", "no")


# ---------------------------------------------------------------------------
# Scalar-loop kernels (numba targets)
# ---------------------------------------------------------------------------


def _lae(a: float, b: float) -> float:
    if a < b:
        a, b = b, a
    if b == NEG_INF:
        return a
    return a + math.log1p(math.exp(b - a))


def _transducer_alpha_loop(blank: np.ndarray, vy: np.ndarray) -> np.ndarray:
    """Forward lattice scores.

    ``blank[t, l]`` is the log-probability of emitting the no-output symbol at
    frame t after l labels; ``vy[t, l]`` is the log-probability of emitting
    label l+1 there.  ``alpha[t, l]`` sums all prefixes reaching node (t, l).
    """
    T, L1 = blank.shape
    alpha = np.full((T, L1), NEG_INF)
    alpha[0, 0] = 0.0
    for t in range(T):
        for l in range(L1):
            if t == 0 and l == 0:
                continue
            up = alpha[t - 1, l] + blank[t - 1, l] if t > 0 else NEG_INF
            left = alpha[t, l - 1] + vy[t, l - 1] if l > 0 else NEG_INF
            alpha[t, l] = _lae(up, left)
    return alpha


def _transducer_beta_loop(blank: np.ndarray, vy: np.ndarray) -> np.ndarray:
    """Backward lattice scores; ``beta[0, 0]`` is the total log-likelihood."""
    T, L1 = blank.shape
    L = L1 - 1
    beta = np.full((T, L1), NEG_INF)
    beta[T - 1, L] = blank[T - 1, L]
    for t in range(T - 1, -1, -1):
        for l in range(L, -1, -1):
            if t == T - 1 and l == L:
                continue
            down = blank[t, l] + beta[t + 1, l] if t < T - 1 else NEG_INF
            right = vy[t, l] + beta[t, l + 1] if l < L else NEG_INF
            beta[t, l] = _lae(down, right)
    return beta


def _ctc_alpha_loop(logp: np.ndarray, ext: np.ndarray) -> np.ndarray:
    """CTC forward over the separator-expanded state sequence ``ext``."""
    T = logp.shape[0]
    S = ext.shape[0]
    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = logp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = logp[0, ext[1]]
    for t in range(1, T):
        for s in range(S):
            acc = alpha[t - 1, s]
            if s >= 1:
                acc = _lae(acc, alpha[t - 1, s - 1])
            if s >= 2 and ext[s] != ext[s - 2]:
                acc = _lae(acc, alpha[t - 1, s - 2])
            alpha[t, s] = acc + logp[t, ext[s]]
    return alpha


def _ctc_beta_loop(logp: np.ndarray, ext: np.ndarray) -> np.ndarray:
    T = logp.shape[0]
    S = ext.shape[0]
    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = logp[T - 1, ext[S - 1]]
    if S > 1:
        beta[T - 1, S - 2] = logp[T - 1, ext[S - 2]]
    for t in range(T - 2, -1, -1):
        for s in range(S - 1, -1, -1):
            acc = beta[t + 1, s]
            if s + 1 < S:
                acc = _lae(acc, beta[t + 1, s + 1])
            if s + 2 < S and ext[s] != ext[s + 2]:
                acc = _lae(acc, beta[t + 1, s + 2])
            beta[t, s] = acc + logp[t, ext[s]]
    return beta


# ---------------------------------------------------------------------------
# Pure-numpy fallbacks
# ---------------------------------------------------------------------------


def transducer_alpha_py(blank: np.ndarray, vy: np.ndarray) -> np.ndarray:
    """Anti-diagonal sweep: both predecessors of (t, l) sit on diagonal t+l-1."""
    T, L1 = blank.shape
    alpha = np.full((T, L1), NEG_INF)
    alpha[0, 0] = 0.0
    for d in range(1, T + L1 - 1):
        t_lo = max(0, d - (L1 - 1))
        t_hi = min(T - 1, d)
        t = np.arange(t_lo, t_hi + 1)
        l = d - t
        tm = np.maximum(t - 1, 0)
        lm = np.maximum(l - 1, 0)
        up = np.where(t > 0, alpha[tm, l] + blank[tm, l], NEG_INF)
        left = np.where(l > 0, alpha[t, lm] + vy[t, lm], NEG_INF)
        alpha[t, l] = np.logaddexp(up, left)
    return alpha


def transducer_beta_py(blank: np.ndarray, vy: np.ndarray) -> np.ndarray:
    T, L1 = blank.shape
    L = L1 - 1
    beta = np.full((T, L1), NEG_INF)
    beta[T - 1, L] = blank[T - 1, L]
    for d in range(T + L - 1, -1, -1):
        t_lo = max(0, d - L)
        t_hi = min(T - 1, d)
        t = np.arange(t_lo, t_hi + 1)
        l = d - t
        keep = ~((t == T - 1) & (l == L))
        t, l = t[keep], l[keep]
        if t.size == 0:
            continue
        tp = np.minimum(t + 1, T - 1)
        lp = np.minimum(l + 1, L)
        down = np.where(t < T - 1, blank[t, l] + beta[tp, l], NEG_INF)
        right = np.where(l < L, vy[t, l] + beta[t, lp], NEG_INF)
        beta[t, l] = np.logaddexp(down, right)
    return beta


def ctc_alpha_py(logp: np.ndarray, ext: np.ndarray) -> np.ndarray:
    """Row-vectorized forward: row t depends only on shifted copies of row t-1."""
    T = logp.shape[0]
    S = ext.shape[0]
    skip_ok = np.zeros(S, dtype=bool)
    if S > 2:
        skip_ok[2:] = ext[2:] != ext[:-2]
    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = logp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = logp[0, ext[1]]
    for t in range(1, T):
        prev = alpha[t - 1]
        shifted1 = np.concatenate(([NEG_INF], prev[:-1]))
        shifted2 = np.concatenate(([NEG_INF, NEG_INF], prev[:-2])) if S > 2 else np.full(S, NEG_INF)
        acc = np.logaddexp(prev, shifted1)
        acc = np.logaddexp(acc, np.where(skip_ok, shifted2, NEG_INF))
        alpha[t] = acc + logp[t, ext]
    return alpha


def ctc_beta_py(logp: np.ndarray, ext: np.ndarray) -> np.ndarray:
    T = logp.shape[0]
    S = ext.shape[0]
    skip_ok = np.zeros(S, dtype=bool)
    if S > 2:
        skip_ok[:-2] = ext[:-2] != ext[2:]
    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = logp[T - 1, ext[S - 1]]
    if S > 1:
        beta[T - 1, S - 2] = logp[T - 1, ext[S - 2]]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        shifted1 = np.concatenate((nxt[1:], [NEG_INF]))
        shifted2 = np.concatenate((nxt[2:], [NEG_INF, NEG_INF])) if S > 2 else np.full(S, NEG_INF)
        acc = np.logaddexp(nxt, shifted1)
        acc = np.logaddexp(acc, np.where(skip_ok, shifted2, NEG_INF))
        beta[t] = acc + logp[t, ext]
    return beta


# ---------------------------------------------------------------------------
# Path selection
# ---------------------------------------------------------------------------

USE_NUMBA = False
if _numba_requested():
    try:
        from numba import njit

        _lae = njit(cache=True, inline="always")(_lae)  # noqa: F811
        transducer_alpha = njit(cache=True)(_transducer_alpha_loop)
        transducer_beta = njit(cache=True)(_transducer_beta_loop)
        ctc_alpha = njit(cache=True)(_ctc_alpha_loop)
        ctc_beta = njit(cache=True)(_ctc_beta_loop)
        USE_NUMBA = True
    except ImportError:
        pass

if not USE_NUMBA:
    transducer_alpha = transducer_alpha_py
    transducer_beta = transducer_beta_py
    ctc_alpha = ctc_alpha_py
    ctc_beta = ctc_beta_py


def warmup() -> None:
    """Trigger JIT compilation so timing-sensitive callers pay it up front."""
    blank = np.log(np.full((2, 2), 0.5))
    vy = np.log(np.full((2, 2), 0.5))
    transducer_alpha(blank, vy)
    transducer_beta(blank, vy)
    logp = np.log(np.full((2, 3), 1.0 / 3.0))
    ext = np.array([2, 0, 2], dtype=np.int64)
    ctc_alpha(logp, ext)
    ctc_beta(logp, ext)
