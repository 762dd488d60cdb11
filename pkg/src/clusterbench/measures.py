"""Clustering quality measures.

Intrinsic measures score a clustering against its network: ``modularity``
and ``conductance``. Nodes the clustering leaves out are treated as
singleton clusters.

Extrinsic measures compare two clusterings of the same node universe:
``nmi`` (disjoint partitions only), ``omega`` and the F1 pair ``f1a`` /
``f1h`` (overlaps allowed). A universe mismatch is an error, never padded.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .netdata import Clustering

logger = logging.getLogger(__name__)


class MeasureError(ValueError):
    pass


class UnsupportedOverlapError(MeasureError):
    pass


@dataclass(frozen=True)
class MeasureResult:
    name: str
    value: float
    direction: str
    domain: str


@dataclass(frozen=True)
class MeasureInfo:
    name: str
    kind: str  # "intrinsic" or "extrinsic"
    direction: str
    domain: str


MEASURES = {
    "modularity": MeasureInfo("modularity", "intrinsic", "HigherBetter", "[-0.5, 1]"),
    "conductance": MeasureInfo("conductance", "intrinsic", "LowerBetter", "[0, 1], mean over clusters"),
    "nmi": MeasureInfo("nmi", "extrinsic", "HigherBetter", "[0, 1], max-entropy normalized"),
    "omega": MeasureInfo("omega", "extrinsic", "HigherBetter", "<= 1, 0 at chance"),
    "f1a": MeasureInfo("f1a", "extrinsic", "HigherBetter", "[0, 1]"),
    "f1h": MeasureInfo("f1h", "extrinsic", "HigherBetter", "[0, 1], <= f1a"),
}


# ------------------------------------------------------------------- helpers

def _as_clustering(c):
    return c if isinstance(c, Clustering) else Clustering(c)


def _same_universe(a, b):
    na, nb = set(a.nodes()), set(b.nodes())
    if na != nb:
        raise MeasureError(f"clusterings cover different node sets (symmetric difference: {len(na ^ nb)} nodes)")
    return a.nodes()


def _csr(clustering, index):
    ptr = np.zeros(len(clustering) + 1, dtype=np.int64)
    np.cumsum(clustering.sizes(), out=ptr[1:])
    idx = np.fromiter((index[v] for c in clustering for v in c), dtype=np.int64, count=int(ptr[-1]))
    return ptr, idx


def _graph_arrays(net, clustering):
    """Dense node index covering the network plus any clustered nodes it lacks."""
    index = {v: i for i, v in enumerate(net.nodes)}
    missing = [v for v in clustering.nodes() if v not in index]
    if missing:
        raise MeasureError(f"{len(missing)} clustered nodes are absent from the network, e.g. {missing[0]!r}")
    m = len(net.edges)
    u = np.fromiter((index[s] for s, _, _ in net.edges), dtype=np.int64, count=m)
    v = np.fromiter((index[d] for _, d, _ in net.edges), dtype=np.int64, count=m)
    w = np.fromiter((e[2] for e in net.edges), dtype=np.float64, count=m)
    return index, u, v, w


def pad_unassigned(clustering, universe):
    """Add the nodes of ``universe`` missing from ``clustering`` as singleton clusters.

    Only for algorithms that leave nodes out by design; the measures
    themselves never pad. Returns ``(padded, n_added)``.
    """
    c = _as_clustering(clustering)
    padded = _with_singletons(c, universe)
    return padded, len(padded) - len(c)


def _with_singletons(clustering, nodes):
    covered = set(clustering.nodes())
    extra = [(v,) for v in nodes if v not in covered]
    return Clustering(clustering.clusters + tuple(extra)) if extra else clustering


# ---------------------------------------------------------------- intrinsic

def modularity(net, clustering):
    """Newman-Girvan modularity of a non-overlapping clustering.

    Arcs are read as undirected edges. Overlapping input raises
    :class:`UnsupportedOverlapError`.
    """
    c = _as_clustering(clustering)
    if not c.is_disjoint():
        raise UnsupportedOverlapError("modularity is defined for non-overlapping clusterings only")
    index, u, v, w = _graph_arrays(net, c)
    total = w.sum()
    if total <= 0:
        raise MeasureError("modularity is undefined for a network without links")
    n = len(index)
    label = np.full(n, -1, dtype=np.int64)
    for ci, members in enumerate(c):
        label[[index[x] for x in members]] = ci
    free = label < 0
    label[free] = len(c) + np.arange(free.sum())
    k = int(label.max()) + 1 if n else 0

    deg = np.bincount(label[u], weights=w, minlength=k) + np.bincount(label[v], weights=w, minlength=k)
    inner = label[u] == label[v]
    w_in = np.bincount(label[u][inner], weights=w[inner], minlength=k)
    return float(w_in.sum() / total - np.sum((deg / (2.0 * total)) ** 2))


def conductance(net, clustering):
    """Mean conductance ``cut(S) / min(vol(S), vol(V - S))`` over clusters.

    Lower is better. Clusters with a zero-volume side are skipped; if every
    cluster is skipped the value is undefined and :class:`MeasureError` is
    raised.
    """
    import scipy.sparse as sp  # deferred: measure jobs that never need it start faster

    c = _with_singletons(_as_clustering(clustering), net.nodes)
    index, u, v, w = _graph_arrays(net, c)
    n = len(index)
    ptr, idx = _csr(c, index)
    memb = sp.csr_matrix((np.ones(len(idx)), idx, ptr), shape=(len(c), n))
    deg = np.bincount(u, weights=w, minlength=n) + np.bincount(v, weights=w, minlength=n)
    vol = memb @ deg
    both = memb[:, u].multiply(memb[:, v])
    inner = np.asarray(both @ w).ravel()
    cut = vol - 2.0 * inner
    total_vol = deg.sum()
    denom = np.minimum(vol, total_vol - vol)
    ok = denom > 0
    skipped = int((~ok).sum())
    if skipped:
        logger.warning("conductance: skipped %d clusters with a zero-volume side", skipped)
    if not ok.any():
        raise MeasureError("conductance is undefined: no cluster has positive volume on both sides")
    return float(np.mean(np.clip(cut[ok] / denom[ok], 0.0, 1.0)))


# ---------------------------------------------------------------- extrinsic

def _entropy(counts, n):
    p = counts[counts > 0] / n
    return float(-np.sum(p * np.log(p)))


def nmi(a, b):
    """NMI of two disjoint partitions of one node set, normalized by max entropy."""
    a, b = _as_clustering(a), _as_clustering(b)
    if not (a.is_disjoint() and b.is_disjoint()):
        raise UnsupportedOverlapError("built-in nmi needs disjoint partitions; use an overlap-capable adapter")
    nodes = _same_universe(a, b)
    n = len(nodes)
    if n == 0:
        raise MeasureError("empty clusterings")
    index = {v: i for i, v in enumerate(nodes)}
    la = np.empty(n, dtype=np.int64)
    lb = np.empty(n, dtype=np.int64)
    for ci, c in enumerate(a):
        la[[index[v] for v in c]] = ci
    for ci, c in enumerate(b):
        lb[[index[v] for v in c]] = ci
    ca = np.bincount(la)
    cb = np.bincount(lb)
    ha, hb = _entropy(ca, n), _entropy(cb, n)
    norm = max(ha, hb)
    if norm == 0.0:
        # both sides are the one-cluster partition of the same nodes
        return 1.0
    pairs, nij = np.unique(la * len(cb) + lb, return_counts=True)
    ai = ca[pairs // len(cb)]
    bj = cb[pairs % len(cb)]
    mi = float(np.sum(nij / n * np.log(n * nij / (ai * bj))))
    return min(max(mi / norm, 0.0), 1.0)


def _count_distribution(counts, n_pairs):
    """Histogram of co-membership counts over all node pairs, zeros included."""
    hist = np.bincount(counts) if len(counts) else np.zeros(1, dtype=np.int64)
    hist = hist.astype(np.float64)
    hist[0] = n_pairs - len(counts)
    return hist


def omega_index(a, b):
    """Omega index: chance-corrected agreement on how often each node pair co-occurs."""
    a, b = _as_clustering(a), _as_clustering(b)
    nodes = _same_universe(a, b)
    n = len(nodes)
    if n < 2:
        raise MeasureError("omega needs at least two nodes")
    index = {v: i for i, v in enumerate(nodes)}
    ka, ca = _kernels.cooccurrence(*_csr(a, index), n)
    kb, cb = _kernels.cooccurrence(*_csr(b, index), n)
    n_pairs = n * (n - 1) // 2

    common, ia, ib = np.intersect1d(ka, kb, assume_unique=True, return_indices=True)
    agree = int(np.sum(ca[ia] == cb[ib]))
    # pairs never co-clustered on either side agree at count zero
    agree += n_pairs - (len(ka) + len(kb) - len(common))
    observed = agree / n_pairs

    pa = _count_distribution(ca, n_pairs) / n_pairs
    pb = _count_distribution(cb, n_pairs) / n_pairs
    top = min(len(pa), len(pb))
    expected = float(np.dot(pa[:top], pb[:top]))
    if expected >= 1.0:
        return 1.0 if observed >= 1.0 else 0.0
    return (observed - expected) / (1.0 - expected)


def f1_scores(a, b):
    """``(f1a, f1h)``: arithmetic and harmonic mean of the two directional best-match F1 averages."""
    a, b = _as_clustering(a), _as_clustering(b)
    if len(a) == 0 or len(b) == 0:
        raise MeasureError("f1 needs non-empty clusterings")
    nodes = _same_universe(a, b)
    index = {v: i for i, v in enumerate(nodes)}
    pa, ia = _csr(a, index)
    pb, ib = _csr(b, index)
    n = len(nodes)
    ab = float(np.mean(_kernels.best_match_f1(pa, ia, pb, ib, n)))
    ba = float(np.mean(_kernels.best_match_f1(pb, ib, pa, ia, n)))
    f1a = (ab + ba) / 2.0
    f1h = 2.0 * ab * ba / (ab + ba) if ab + ba > 0 else 0.0
    return f1a, f1h


def evaluate(name, clustering, net=None, truth=None):
    """Run a measure by name and wrap the value with its metadata."""
    try:
        info = MEASURES[name]
    except KeyError:
        raise MeasureError(f"unknown measure {name!r}; known: {', '.join(sorted(MEASURES))}") from None
    if info.kind == "intrinsic":
        if net is None:
            raise MeasureError(f"{name} needs a network")
        value = modularity(net, clustering) if name == "modularity" else conductance(net, clustering)
    else:
        if truth is None:
            raise MeasureError(f"{name} needs a ground-truth clustering")
        if name == "nmi":
            value = nmi(clustering, truth)
        elif name == "omega":
            value = omega_index(clustering, truth)
        else:
            f1a, f1h = f1_scores(clustering, truth)
            value = f1a if name == "f1a" else f1h
    if not math.isfinite(value):
        raise MeasureError(f"{name} produced a non-finite value")
    return MeasureResult(name, value, info.direction, info.domain)
