"""numba implementations of the kernels in :mod:`clusterbench._kernels`.

Imported lazily: loading numba costs more than small inputs take to process.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def _invert(ptr, idx, n):
    cnt = np.zeros(n + 1, dtype=np.int64)
    for p in range(len(idx)):
        cnt[idx[p] + 1] += 1
    for i in range(n):
        cnt[i + 1] += cnt[i]
    fill = cnt[:-1].copy()
    owner = np.empty(len(idx), dtype=np.int64)
    for c in range(len(ptr) - 1):
        for p in range(ptr[c], ptr[c + 1]):
            node = idx[p]
            owner[fill[node]] = c
            fill[node] += 1
    return cnt, owner


@njit(cache=True)
def _best_match_f1_nb(a_ptr, a_idx, b_ptr, b_idx, n):
    ka = len(a_ptr) - 1
    kb = len(b_ptr) - 1
    out = np.zeros(ka, dtype=np.float64)
    if ka == 0 or kb == 0:
        return out
    node_ptr, node_cl = _invert(b_ptr, b_idx, n)
    scratch = np.zeros(kb, dtype=np.int64)
    touched = np.empty(kb, dtype=np.int64)
    for x in range(ka):
        nt = 0
        for p in range(a_ptr[x], a_ptr[x + 1]):
            node = a_idx[p]
            for q in range(node_ptr[node], node_ptr[node + 1]):
                y = node_cl[q]
                if scratch[y] == 0:
                    touched[nt] = y
                    nt += 1
                scratch[y] += 1
        sx = a_ptr[x + 1] - a_ptr[x]
        best = 0.0
        for t in range(nt):
            y = touched[t]
            f = 2.0 * scratch[y] / (sx + b_ptr[y + 1] - b_ptr[y])
            if f > best:
                best = f
            scratch[y] = 0
        out[x] = best
    return out


@njit(cache=True)
def _cooccurrence_nb(ptr, idx, n):
    node_ptr, node_cl = _invert(ptr, idx, n)
    scratch = np.zeros(n, dtype=np.int64)
    touched = np.empty(n, dtype=np.int64)
    cap = 1024
    keys = np.empty(cap, dtype=np.int64)
    counts = np.empty(cap, dtype=np.int64)
    size = 0
    for i in range(n):
        nt = 0
        for q in range(node_ptr[i], node_ptr[i + 1]):
            c = node_cl[q]
            for p in range(ptr[c], ptr[c + 1]):
                j = idx[p]
                if j > i:
                    if scratch[j] == 0:
                        touched[nt] = j
                        nt += 1
                    scratch[j] += 1
        if size + nt > cap:
            while size + nt > cap:
                cap *= 2
            nk = np.empty(cap, dtype=np.int64)
            nc = np.empty(cap, dtype=np.int64)
            nk[:size] = keys[:size]
            nc[:size] = counts[:size]
            keys = nk
            counts = nc
        sub = np.sort(touched[:nt])
        for t in range(nt):
            j = sub[t]
            keys[size] = i * n + j
            counts[size] = scratch[j]
            scratch[j] = 0
            size += 1
    return keys[:size].copy(), counts[:size].copy()


def best_match_f1_numba(a_ptr, a_idx, b_ptr, b_idx, n):
    return _best_match_f1_nb(
        np.ascontiguousarray(a_ptr, dtype=np.int64), np.ascontiguousarray(a_idx, dtype=np.int64),
        np.ascontiguousarray(b_ptr, dtype=np.int64), np.ascontiguousarray(b_idx, dtype=np.int64), int(n))


def cooccurrence_numba(ptr, idx, n):
    if len(ptr) < 2 or n < 2:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    return _cooccurrence_nb(
        np.ascontiguousarray(ptr, dtype=np.int64), np.ascontiguousarray(idx, dtype=np.int64), int(n))
