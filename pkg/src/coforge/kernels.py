"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Set ``COFORGE_NUMBA=0`` to force the fallback. Both paths return
bit-identical results: distances are accumulated in float64 one feature
column at a time, neighbor reductions run sequentially over k, and the
scheduler performs the same float operations in the same order.
"""
from __future__ import annotations

import os

import numpy as np

_WANT_NUMBA = os.environ.get("COFORGE_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _WANT_NUMBA

AGGR_CODES = {"max": 0, "mean": 1, "sum": 2}


# --- brute-force KNN ---------------------------------------------------------

def knn_numpy(x: np.ndarray, k: int) -> np.ndarray:
    n, f = x.shape
    xd = x.astype(np.float64)
    d = np.zeros((n, n), dtype=np.float64)
    for c in range(f):
        diff = xd[:, c][:, None] - xd[:, c][None, :]
        d += diff * diff
    np.fill_diagonal(d, np.inf)
    order = np.argsort(d, axis=1, kind="stable")
    return np.ascontiguousarray(order[:, :k]).astype(np.int64)


def _knn_loop(x, k):
    n, f = x.shape
    out = np.empty((n, k), dtype=np.int64)
    d = np.empty(n, dtype=np.float64)
    for i in range(n):
        for j in range(n):
            d[j] = 0.0
        for c in range(f):
            xi = np.float64(x[i, c])
            for j in range(n):
                diff = xi - np.float64(x[j, c])
                d[j] += diff * diff
        d[i] = np.inf
        order = np.argsort(d, kind="mergesort")
        for j in range(k):
            out[i, j] = order[j]
    return out


# --- neighbor aggregation ----------------------------------------------------

def aggregate_numpy(x: np.ndarray, nbr: np.ndarray, code: int) -> np.ndarray:
    k = nbr.shape[1]
    acc = x[nbr[:, 0]].copy()
    for j in range(1, k):
        rows = x[nbr[:, j]]
        if code == 0:
            np.maximum(acc, rows, out=acc)
        else:
            acc += rows
    if code == 1:
        acc = acc / np.float32(k)
    return acc.astype(x.dtype, copy=False)


def _aggregate_loop(x, nbr, code):
    n, f = x.shape
    k = nbr.shape[1]
    out = np.empty((n, f), dtype=x.dtype)
    for i in range(n):
        for c in range(f):
            out[i, c] = x[nbr[i, 0], c]
        for j in range(1, k):
            r = nbr[i, j]
            for c in range(f):
                v = x[r, c]
                if code == 0:
                    if v > out[i, c]:
                        out[i, c] = v
                else:
                    out[i, c] += v
        if code == 1:
            for c in range(f):
                out[i, c] = out[i, c] / np.float32(k)
    return out


# --- earliest-start list scheduling -------------------------------------------

def _schedule_loop(durations, resources, num_batches, depth, n_res):
    """Start/end times of every (batch, stage) task.

    Among tasks whose predecessor has finished and whose batch is admitted,
    the one with the earliest possible start goes first; ties break on ready
    time, then batch id, then stage. Batch b is admitted when batch b - depth
    completes.
    """
    s = durations.shape[0]
    start = np.zeros((num_batches, s))
    end = np.zeros((num_batches, s))
    free = np.zeros(n_res)
    ready = np.full(num_batches, np.inf)
    nxt = np.zeros(num_batches, dtype=np.int64)
    for b in range(min(depth, num_batches)):
        ready[b] = 0.0
    for _ in range(num_batches * s):
        best = -1
        best_start = np.inf
        best_ready = np.inf
        for b in range(num_batches):
            if nxt[b] >= s or ready[b] == np.inf:
                continue
            r = resources[nxt[b]]
            st = ready[b] if ready[b] > free[r] else free[r]
            if st < best_start or (st == best_start and ready[b] < best_ready):
                best, best_start, best_ready = b, st, ready[b]
        j = nxt[best]
        fin = best_start + durations[j]
        start[best, j] = best_start
        end[best, j] = fin
        free[resources[j]] = fin
        nxt[best] = j + 1
        if j + 1 < s:
            ready[best] = fin
        else:
            ready[best] = np.inf
            if best + depth < num_batches:
                ready[best + depth] = fin
    return start, end


def schedule_numpy(durations, resources, num_batches, depth, n_res=4):
    return _schedule_loop(np.asarray(durations, dtype=np.float64), np.asarray(resources, dtype=np.int64),
                          int(num_batches), int(depth), int(n_res))


if HAVE_NUMBA:
    _knn_jit = numba.njit(cache=True, nogil=True)(_knn_loop)
    _aggregate_jit = numba.njit(cache=True, nogil=True)(_aggregate_loop)
    _schedule_jit = numba.njit(cache=True, nogil=True)(_schedule_loop)

    def knn_numba(x: np.ndarray, k: int) -> np.ndarray:
        return _knn_jit(np.ascontiguousarray(x), int(k))

    def aggregate_numba(x: np.ndarray, nbr: np.ndarray, code: int) -> np.ndarray:
        return _aggregate_jit(np.ascontiguousarray(x), np.ascontiguousarray(nbr, dtype=np.int64), int(code))

    def schedule_numba(durations, resources, num_batches, depth, n_res=4):
        return _schedule_jit(np.asarray(durations, dtype=np.float64), np.asarray(resources, dtype=np.int64),
                             int(num_batches), int(depth), int(n_res))
else:  # pragma: no cover
    knn_numba = knn_numpy
    aggregate_numba = aggregate_numpy
    schedule_numba = schedule_numpy


if USE_NUMBA:
    knn, aggregate_rows, schedule = knn_numba, aggregate_numba, schedule_numba
else:
    knn, aggregate_rows, schedule = knn_numpy, aggregate_numpy, schedule_numpy
