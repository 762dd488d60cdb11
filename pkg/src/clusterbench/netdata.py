"""Network and clustering file I/O, shuffling, and a planted-partition generator.

Formats
-------
nsl family (``.nse`` undirected edges, ``.nsa`` directed arcs, ``.ncol``
undirected, ``.nsl`` undirected unless told otherwise)::

    # Nodes: 3 Edges: 3 Weighted: 0
    a b
    b c
    a c

cnl: one cluster per line, node ids separated by whitespace, ``#`` comments.

Node ids are opaque string tokens throughout; nothing here renumbers them.
"""
import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

_HEADER_RE = re.compile(
    r"#\s*Nodes:\s*(?P<nodes>\d+)[\s,;]*(?P<kind>Edges|Arcs|Links):\s*(?P<links>\d+)"
    r"(?:[\s,;]*Weighted:\s*(?P<weighted>[01]))?",
    re.IGNORECASE)

DIRECTED_EXTS = {".nsa"}
NETWORK_EXTS = {".nse", ".nsa", ".ncol", ".nsl"}


class FormatError(ValueError):
    """Malformed network or clustering file."""

    def __init__(self, path, lineno, msg):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


@dataclass(frozen=True)
class Network:
    nodes: tuple
    edges: tuple  # (src, dst, weight)
    directed: bool = False
    weighted: bool = False

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple((str(s), str(d), float(w)) for s, d, w in self.edges))

    @classmethod
    def from_edges(cls, edges, directed=False, weighted=None):
        """Build a network whose node order is the order of first appearance."""
        norm = []
        for e in edges:
            if len(e) == 2:
                norm.append((str(e[0]), str(e[1]), 1.0))
            else:
                norm.append((str(e[0]), str(e[1]), float(e[2])))
        if weighted is None:
            weighted = any(w != 1.0 for _, _, w in norm)
        return cls(_first_appearance(norm), norm, directed, weighted)

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_edges(self):
        return len(self.edges)

    def edge_multiset(self):
        """Edges as a sorted list, undirected ones with canonical endpoint order."""
        if self.directed:
            return sorted(self.edges)
        return sorted((min(s, d), max(s, d), w) for s, d, w in self.edges)

    def adjacency(self):
        """Undirected neighbour lists keyed by node id (directed arcs are symmetrized)."""
        adj = {v: [] for v in self.nodes}
        for s, d, _ in self.edges:
            adj.setdefault(s, []).append(d)
            if s != d:
                adj.setdefault(d, []).append(s)
        return adj


def _first_appearance(edges):
    seen = {}
    for s, d, _ in edges:
        seen.setdefault(s, None)
        seen.setdefault(d, None)
    return tuple(seen)


@dataclass(frozen=True)
class Clustering:
    """Clusters of node ids; a node may belong to several clusters."""

    clusters: tuple = field(default_factory=tuple)

    def __post_init__(self):
        cls = tuple(tuple(str(v) for v in c) for c in self.clusters)
        for i, c in enumerate(cls):
            if not c:
                raise ValueError(f"cluster #{i} is empty")
            if len(set(c)) != len(c):
                raise ValueError(f"cluster #{i} lists a node more than once")
        object.__setattr__(self, "clusters", cls)

    def __len__(self):
        return len(self.clusters)

    def __iter__(self):
        return iter(self.clusters)

    def sizes(self):
        return [len(c) for c in self.clusters]

    def nodes(self):
        """Node ids covered, in order of first appearance."""
        return list(dict.fromkeys(v for c in self.clusters for v in c))

    def is_disjoint(self):
        return sum(self.sizes()) == len(self.nodes())


# ------------------------------------------------------------------- networks

def read_nsl(path, directed=None):
    """Parse an nsl-family edge list.

    Directedness comes from the extension unless ``directed`` is given.
    Weights are taken from the header when it has a ``Weighted:`` field,
    otherwise from the column count.
    """
    path = Path(path)
    if directed is None:
        directed = path.suffix.lower() in DIRECTED_EXTS
    header = None
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text:
                continue
            if text.startswith("#"):
                if header is None and not rows:
                    m = _HEADER_RE.match(text)
                    if m:
                        header = m
                continue
            parts = text.split()
            if len(parts) not in (2, 3):
                raise FormatError(path, lineno, f"expected 'src dst [weight]', got {len(parts)} fields")
            weight = None
            if len(parts) == 3:
                try:
                    weight = float(parts[2])
                except ValueError:
                    raise FormatError(path, lineno, f"bad weight {parts[2]!r}") from None
                if not weight > 0 or not np.isfinite(weight):
                    raise FormatError(path, lineno, f"weight must be positive and finite, got {parts[2]}")
            rows.append((lineno, parts[0], parts[1], weight))

    has_weights = any(w is not None for *_, w in rows)
    if header is not None and header.group("weighted") is not None:
        weighted = header.group("weighted") == "1"
        if not weighted and has_weights:
            ln = next(r[0] for r in rows if r[3] is not None)
            raise FormatError(path, ln, "weight column in a network declared unweighted")
    else:
        weighted = has_weights

    edges = []
    seen = set()
    for lineno, s, d, w in rows:
        key = (s, d) if directed else (min(s, d), max(s, d))
        if key in seen:
            kind = "arc" if directed else "undirected edge"
            raise FormatError(path, lineno, f"duplicate {kind} {s} {d}")
        seen.add(key)
        edges.append((s, d, 1.0 if w is None else w))

    net = Network(_first_appearance(edges), edges, directed, weighted)
    if header is not None:
        if int(header.group("nodes")) != net.n_nodes:
            logger.warning("%s: header declares %s nodes, found %d", path, header.group("nodes"), net.n_nodes)
        if int(header.group("links")) != net.n_edges:
            logger.warning("%s: header declares %s links, found %d", path, header.group("links"), net.n_edges)
    return net


def format_nsl(net):
    kind = "Arcs" if net.directed else "Edges"
    lines = [f"# Nodes: {net.n_nodes} {kind}: {net.n_edges} Weighted: {int(net.weighted)}"]
    if net.weighted:
        lines.extend(f"{s} {d} {w!r}" for s, d, w in net.edges)
    else:
        lines.extend(f"{s} {d}" for s, d, _ in net.edges)
    return "\n".join(lines) + "\n"


def write_nsl(net, path):
    linked = {v for s, d, _ in net.edges for v in (s, d)}
    isolated = net.n_nodes - len(linked & set(net.nodes))
    if isolated:
        # an edge list has no line for a node without links
        logger.warning("%s: %d isolated nodes are not representable and will be lost on reading", path, isolated)
    Path(path).write_text(format_nsl(net), encoding="utf-8")


def _rng(seed, k):
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, int(k)])


def shuffle(net, k, seed):
    """Reorder nodes and edge lines; ``k == 0`` is the original order."""
    if k < 0:
        raise ValueError("shuffle index must be >= 0")
    if k == 0:
        return net
    rng = _rng(seed, k)
    nodes = [net.nodes[i] for i in rng.permutation(net.n_nodes)]
    edges = [net.edges[i] for i in rng.permutation(net.n_edges)]
    return Network(nodes, edges, net.directed, net.weighted)


def split_name(path):
    """``nettype^instance^shuffle`` style stem -> (nettype, instance)."""
    stem = Path(path).stem
    parts = stem.split("^")
    return parts[0], (parts[1] if len(parts) > 1 else "")


def net_dirname(nettype, instance=""):
    return f"{nettype}^{instance}" if instance != "" else nettype


def shuffle_path(datadir, nettype, instance, basename, k, ext=".nse"):
    """``<datadir>/<nettype>^<instance>/<basename>^<k><ext>``."""
    return Path(datadir) / net_dirname(nettype, instance) / f"{basename}^{k}{ext}"


def write_shuffles(net, count, seed, datadir, nettype, instance="", basename=None, ext=None):
    """Write shuffles ``0 .. count - 1`` and return their paths."""
    basename = basename or net_dirname(nettype, instance)
    ext = ext or (".nsa" if net.directed else ".nse")
    paths = []
    for k in range(count):
        p = shuffle_path(datadir, nettype, instance, basename, k, ext)
        p.parent.mkdir(parents=True, exist_ok=True)
        write_nsl(shuffle(net, k, seed), p)
        paths.append(p)
    return paths


# ---------------------------------------------------------------- clusterings

def read_cnl(path):
    clusters = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            members = text.split()
            if len(set(members)) != len(members):
                raise FormatError(path, lineno, "node repeated within a cluster")
            clusters.append(members)
    return Clustering(clusters)


def write_cnl(clustering, path, comment=None):
    lines = []
    if comment:
        lines.append(f"# {comment}")
    lines.extend(" ".join(c) for c in clustering)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


# ------------------------------------------------------------------ generator

def gen_planted_partition(n_nodes, n_clusters, p_in, p_out, seed):
    """Planted partition graph with its ground truth.

    Clusters have equal sizes up to one node. Each intra-cluster pair is
    linked with probability ``p_in`` and each inter-cluster pair with
    ``p_out``. Node ids are ``"0" .. str(n_nodes - 1)``.
    """
    if not 1 <= n_clusters <= n_nodes:
        raise ValueError("need 1 <= n_clusters <= n_nodes")
    # p_in == p_out is accepted for degenerate fixtures
    if not 0.0 <= p_out <= p_in <= 1.0:
        raise ValueError("need 0 <= p_out < p_in <= 1")
    rng = np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)
    blocks = np.array_split(np.arange(n_nodes), n_clusters)

    src, dst = [], []
    for a, ba in enumerate(blocks):
        sa = len(ba)
        if sa > 1 and p_in > 0:
            iu, ju = np.triu_indices(sa, k=1)
            m = rng.binomial(len(iu), p_in)
            pick = np.sort(rng.choice(len(iu), size=m, replace=False))
            src.append(ba[iu[pick]])
            dst.append(ba[ju[pick]])
        if p_out <= 0:
            continue
        for bb in blocks[a + 1:]:
            total = sa * len(bb)
            m = rng.binomial(total, p_out)
            pick = np.sort(rng.choice(total, size=m, replace=False))
            src.append(ba[pick // len(bb)])
            dst.append(bb[pick % len(bb)])

    s = np.concatenate(src) if src else np.empty(0, dtype=np.int64)
    d = np.concatenate(dst) if dst else np.empty(0, dtype=np.int64)
    edges = [(str(i), str(j), 1.0) for i, j in zip(s.tolist(), d.tolist())]
    net = Network([str(i) for i in range(n_nodes)], edges, directed=False, weighted=False)
    truth = Clustering([[str(v) for v in b] for b in blocks])
    return net, truth
