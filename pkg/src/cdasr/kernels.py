"""Hot numeric kernels: CTC dynamic programs and Levenshtein alignment.

Each kernel has a single pure-numpy implementation that is JIT-compiled with
numba when available. Set ``CDASR_KERNELS=numpy`` to force the interpreted
fallback (used by the benchmark and as an escape hatch on platforms where
numba is unavailable).
"""

import math
import os

import numpy as np

NEG_INF = -np.inf


def _logaddexp(a, b):
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a < b:
        a, b = b, a
    return a + math.log1p(math.exp(b - a))


def _ctc_forward(logp, ext):
    """Log total probability of all blank-augmented paths for ``ext``.

    logp: (T, V) log posteriors. ext: blank-interleaved label ids, length
    2L+1. Returns -inf when the labels are unreachable in T frames.
    """
    T = logp.shape[0]
    S = ext.shape[0]
    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = logp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = logp[0, ext[1]]
    for t in range(1, T):
        for s in range(S):
            a = alpha[t - 1, s]
            if s > 0:
                a = _logaddexp(a, alpha[t - 1, s - 1])
            if s > 1 and ext[s] != ext[s - 2] and ext[s] != ext[0]:
                a = _logaddexp(a, alpha[t - 1, s - 2])
            if a != NEG_INF:
                alpha[t, s] = a + logp[t, ext[s]]
    total = alpha[T - 1, S - 1]
    if S > 1:
        total = _logaddexp(total, alpha[T - 1, S - 2])
    return total


def _ctc_occupancy(logp, ext):
    """Forward-backward state occupancies.

    Returns (logZ, G) where G[t, k] = d logZ / d logp[t, k], i.e. the
    posterior probability that the path emits symbol k at frame t.
    """
    T = logp.shape[0]
    V = logp.shape[1]
    S = ext.shape[0]
    grad = np.zeros((T, V))

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = logp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = logp[0, ext[1]]
    for t in range(1, T):
        for s in range(S):
            a = alpha[t - 1, s]
            if s > 0:
                a = _logaddexp(a, alpha[t - 1, s - 1])
            if s > 1 and ext[s] != ext[s - 2] and ext[s] != ext[0]:
                a = _logaddexp(a, alpha[t - 1, s - 2])
            if a != NEG_INF:
                alpha[t, s] = a + logp[t, ext[s]]
    logz = alpha[T - 1, S - 1]
    if S > 1:
        logz = _logaddexp(logz, alpha[T - 1, S - 2])
    if logz == NEG_INF:
        return NEG_INF, grad

    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        for s in range(S):
            b = beta[t + 1, s] + logp[t + 1, ext[s]]
            if s + 1 < S:
                b = _logaddexp(b, beta[t + 1, s + 1] + logp[t + 1, ext[s + 1]])
            if s + 2 < S and ext[s + 2] != ext[s] and ext[s + 2] != ext[0]:
                b = _logaddexp(b, beta[t + 1, s + 2] + logp[t + 1, ext[s + 2]])
            beta[t, s] = b

    for t in range(T):
        acc = np.full(V, NEG_INF)
        for s in range(S):
            ab = alpha[t, s] + beta[t, s]
            if ab != NEG_INF:
                acc[ext[s]] = _logaddexp(acc[ext[s]], ab)
        for k in range(V):
            if acc[k] != NEG_INF:
                grad[t, k] = math.exp(acc[k] - logz)
    return logz, grad


def _edit_counts(ref, hyp):
    """Minimum-edit alignment counts (subs, dels, ins).

    Ties in the backtrace prefer substitutions, then deletions, for
    deterministic counts.
    """
    n = ref.shape[0]
    m = hyp.shape[0]
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    for i in range(n + 1):
        d[i, 0] = i
    for j in range(m + 1):
        d[0, j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            if ref[i - 1] == hyp[j - 1]:
                d[i, j] = d[i - 1, j - 1]
            else:
                best = d[i - 1, j - 1]
                if d[i - 1, j] < best:
                    best = d[i - 1, j]
                if d[i, j - 1] < best:
                    best = d[i, j - 1]
                d[i, j] = best + 1
    subs = 0
    dels = 0
    ins = 0
    i = n
    j = m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and ref[i - 1] == hyp[j - 1] and d[i, j] == d[i - 1, j - 1]:
            i -= 1
            j -= 1
        elif i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + 1:
            subs += 1
            i -= 1
            j -= 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return subs, dels, ins


def _pick_backend():
    requested = os.environ.get("CDASR_KERNELS", "numba").strip().lower()
    if requested == "numpy":
        return "numpy"
    try:
        import numba  # noqa: F401
    except ImportError:
        return "numpy"
    return "numba"


BACKEND = _pick_backend()

if BACKEND == "numba":
    from numba import njit

    _logaddexp = njit(cache=True)(_logaddexp)
    ctc_forward = njit(cache=True)(_ctc_forward)
    ctc_occupancy = njit(cache=True)(_ctc_occupancy)
    edit_counts = njit(cache=True)(_edit_counts)
else:
    ctc_forward = _ctc_forward
    ctc_occupancy = _ctc_occupancy
    edit_counts = _edit_counts


def extend_with_blanks(labels, blank):
    """Interleave blanks around a label sequence: [b, l1, b, l2, ..., b]."""
    ext = np.full(2 * len(labels) + 1, blank, dtype=np.int64)
    ext[1::2] = labels
    return ext
