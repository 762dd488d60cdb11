"""Hot loops behind the overlap-aware measures.

Every kernel has two implementations: a numba ``@njit`` version (in
:mod:`clusterbench._kernels_nb`) and a pure numpy/scipy version here. Both
return identical results; ``tests/test_kernels.py`` holds them to that and
``benchmarks/bench_kernels.py`` times them.

Dispatch: the numba path is taken for inputs with at least
``CLUSTERBENCH_NUMBA_MIN`` memberships (default 20000) when numba imports,
and never when ``CLUSTERBENCH_DISABLE_NUMBA`` is set to a true value.
Below the threshold loading numba costs more than it saves.

Clusterings enter the kernels in a CSR-like layout: ``ptr`` of length
``k + 1`` and ``idx`` holding dense node indices, cluster ``c`` being
``idx[ptr[c]:ptr[c + 1]]``.
"""
import importlib
import logging
import os

import numpy as np

logger = logging.getLogger(__name__)

DISABLED = os.environ.get("CLUSTERBENCH_DISABLE_NUMBA", "").strip().lower() not in ("", "0", "false", "no")
NUMBA_MIN = int(os.environ.get("CLUSTERBENCH_NUMBA_MIN", "20000"))

_nb = None


def numba_kernels():
    """The numba kernel module, or None when disabled or unavailable."""
    global _nb
    if DISABLED:
        return None
    if _nb is None:
        try:
            _nb = importlib.import_module("clusterbench._kernels_nb")
        except ImportError as exc:
            logger.info("numba unavailable, using numpy kernels: %s", exc)
            _nb = False
    return _nb or None


def backend(size):
    """Name of the implementation used for an input with ``size`` memberships."""
    return "numba" if size >= NUMBA_MIN and numba_kernels() is not None else "numpy"


def _membership_matrix(ptr, idx, n):
    import scipy.sparse as sp

    k = len(ptr) - 1
    data = np.ones(len(idx), dtype=np.int64)
    return sp.csr_matrix((data, idx, ptr), shape=(k, n))


# ---------------------------------------------------------------- numpy path

def best_match_f1_numpy(a_ptr, a_idx, b_ptr, b_idx, n):
    """Best F1 of every cluster of ``a`` against any cluster of ``b``."""
    ka = len(a_ptr) - 1
    out = np.zeros(ka, dtype=np.float64)
    if ka == 0 or len(b_ptr) < 2:
        return out
    ma = _membership_matrix(a_ptr, a_idx, n)
    mb = _membership_matrix(b_ptr, b_idx, n)
    inter = (ma @ mb.T).tocoo()
    sa = np.diff(a_ptr)
    sb = np.diff(b_ptr)
    f1 = 2.0 * inter.data / (sa[inter.row] + sb[inter.col])
    np.maximum.at(out, inter.row, f1)
    return out


def cooccurrence_numpy(ptr, idx, n):
    """Node pairs ``i < j`` sharing at least one cluster.

    Returns ``(keys, counts)`` with ``keys = i * n + j`` sorted ascending
    and ``counts`` the number of clusters holding both nodes.
    """
    if len(ptr) < 2 or n < 2:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    import scipy.sparse as sp

    m = _membership_matrix(ptr, idx, n)
    co = sp.triu(m.T @ m, k=1).tocoo()
    keys = co.row.astype(np.int64) * n + co.col.astype(np.int64)
    order = np.argsort(keys, kind="stable")
    return keys[order], co.data.astype(np.int64)[order]


# ------------------------------------------------------------------- dispatch

def best_match_f1(a_ptr, a_idx, b_ptr, b_idx, n):
    if backend(len(a_idx) + len(b_idx)) == "numba":
        return numba_kernels().best_match_f1_numba(a_ptr, a_idx, b_ptr, b_idx, n)
    return best_match_f1_numpy(a_ptr, a_idx, b_ptr, b_idx, n)


def cooccurrence(ptr, idx, n):
    if backend(len(idx)) == "numba":
        return numba_kernels().cooccurrence_numba(ptr, idx, n)
    return cooccurrence_numpy(ptr, idx, n)
