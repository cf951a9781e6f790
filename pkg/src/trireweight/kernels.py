"""Brute-force numeric kernels with a numba path and a pure-numpy path.

The numba versions are used when numba imports and ``TRIREWEIGHT_NUMBA`` is not
set to ``0``.  Both paths are always importable so they can be compared
directly (see ``benchmarks/bench_kernels.py``).
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda f: f


def numba_enabled() -> bool:
    return NUMBA_AVAILABLE and os.environ.get("TRIREWEIGHT_NUMBA", "1") != "0"


# ---------------------------------------------------------------------------
# nearest-original test (triplet assumption)
# ---------------------------------------------------------------------------

def nearest_is_origin_numpy(gen: np.ndarray, origin: np.ndarray, originals: np.ndarray,
                            chunk: int = 4096) -> np.ndarray:
    out = np.empty(gen.shape[0], dtype=bool)
    sq_o = (originals * originals).sum(axis=1)
    for start in range(0, gen.shape[0], chunk):
        g = gen[start:start + chunk]
        d = (g * g).sum(axis=1)[:, None] - 2.0 * g @ originals.T + sq_o[None, :]
        rows = np.arange(g.shape[0])
        own = d[rows, origin[start:start + chunk]].copy()
        d[rows, origin[start:start + chunk]] = np.inf
        out[start:start + chunk] = own < d.min(axis=1)
    return out


@njit(cache=True)
def _nearest_is_origin_nb(gen, origin, originals):
    n, dim = gen.shape
    k = originals.shape[0]
    out = np.empty(n, dtype=np.bool_)
    for i in range(n):
        o = origin[i]
        own = 0.0
        for f in range(dim):
            diff = gen[i, f] - originals[o, f]
            own += diff * diff
        ok = True
        for j in range(k):
            if j == o:
                continue
            d = 0.0
            for f in range(dim):
                diff = gen[i, f] - originals[j, f]
                d += diff * diff
                if d > own:
                    break
            if d <= own:
                ok = False
                break
        out[i] = ok
    return out


def nearest_is_origin_numba(gen, origin, originals) -> np.ndarray:
    return _nearest_is_origin_nb(np.ascontiguousarray(gen, dtype=np.float64),
                                 np.ascontiguousarray(origin, dtype=np.int64),
                                 np.ascontiguousarray(originals, dtype=np.float64))


def nearest_is_origin(gen, origin, originals) -> np.ndarray:
    """For each generated row, is its origin strictly the nearest original?"""
    if numba_enabled():
        return nearest_is_origin_numba(gen, origin, originals)
    return nearest_is_origin_numpy(gen, origin, originals)


# ---------------------------------------------------------------------------
# ranking quality: P(score_pos > score_neg) + 0.5 P(tie)
# ---------------------------------------------------------------------------

def ranking_quality_numpy(pos: np.ndarray, neg: np.ndarray) -> float:
    pos = np.sort(np.asarray(pos, dtype=np.float64))
    neg = np.sort(np.asarray(neg, dtype=np.float64))
    below = np.searchsorted(neg, pos, side="left")
    ties = np.searchsorted(neg, pos, side="right") - below
    return float((below.sum() + 0.5 * ties.sum()) / (pos.size * neg.size))


@njit(cache=True)
def _ranking_merge_nb(pos, neg):
    # both inputs sorted ascending; two pointers count negatives below / tied with each positive
    m = neg.shape[0]
    below = 0
    upto = 0
    wins = 0.0
    for i in range(pos.shape[0]):
        p = pos[i]
        while below < m and neg[below] < p:
            below += 1
        if upto < below:
            upto = below
        while upto < m and neg[upto] <= p:
            upto += 1
        wins += below + 0.5 * (upto - below)
    return wins


def ranking_quality_numba(pos, neg) -> float:
    pos = np.sort(np.asarray(pos, dtype=np.float64))
    neg = np.sort(np.asarray(neg, dtype=np.float64))
    return float(_ranking_merge_nb(pos, neg) / (pos.size * neg.size))


def ranking_quality(pos, neg) -> float:
    if np.size(pos) == 0 or np.size(neg) == 0:
        raise ValueError("ranking quality needs both groups nonempty")
    if numba_enabled():
        return ranking_quality_numba(pos, neg)
    return ranking_quality_numpy(pos, neg)


# ---------------------------------------------------------------------------
# floored cross-entropy rows for large Monte-Carlo samples
# ---------------------------------------------------------------------------

def floored_ce_all_labels_numpy(probs: np.ndarray, floor: float) -> np.ndarray:
    """-log(max(p, floor)) for every entry; row j, column k is the loss for label k."""
    return -np.log(np.maximum(probs, floor))


@njit(cache=True)
def _floored_ce_all_labels_nb(probs, floor):
    n, c = probs.shape
    out = np.empty((n, c))
    for i in range(n):
        for k in range(c):
            p = probs[i, k]
            out[i, k] = -np.log(p if p > floor else floor)
    return out


def floored_ce_all_labels(probs, floor: float) -> np.ndarray:
    if numba_enabled():
        return _floored_ce_all_labels_nb(np.ascontiguousarray(probs, dtype=np.float64),
                                         float(floor))
    return floored_ce_all_labels_numpy(probs, floor)
