"""Clustering algorithm adapters, the Randcommuns baseline and level unification.

An adapter only builds an argv and later collects the files the process
wrote; the algorithm itself always runs as a separate pool job.
"""
import logging
import os
import re
import shlex
import shutil
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .netdata import Clustering

logger = logging.getLogger(__name__)

DEFAULT_LEVELS = 10


class RegistryError(KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


def _natural_key(path):
    return [int(t) if t.isdigit() else t for t in re.split(r"(\d+)", Path(path).name)]


def collect_cnl(outdir):
    """Default collector: ``*.cnl`` files in natural order (finest level first)."""
    return sorted(Path(outdir).glob("*.cnl"), key=_natural_key)


@dataclass
class AlgoAdapter:
    name: str
    build_argv: Callable  # (net_path, outdir, params) -> list[str]
    category: str = "algorithm"
    collect: Callable = collect_cnl
    defaults: dict = field(default_factory=dict)
    needs_truth: bool = False
    # output may leave nodes unclustered by design; evaluation pads them as singletons
    partial_cover: bool = False

    def argv(self, net_path, outdir, **params):
        merged = {**self.defaults, **params}
        return [str(a) for a in self.build_argv(str(net_path), str(outdir), merged)]


def command_adapter(name, template, category="algorithm", **defaults):
    """Adapter for an external executable given as a command template.

    Placeholders ``{net}``, ``{outdir}``, ``{truth}``, ``{seed}`` and
    ``{shuffle}`` are substituted per token after shell-style splitting, so
    the executable is started directly, never through a shell.
    """
    tokens = shlex.split(template)
    if not tokens:
        raise ValueError(f"empty command template for {name!r}")

    def build(net, outdir, params):
        values = {"net": net, "outdir": outdir, **params}
        return [t.format(**values) for t in tokens]

    return AlgoAdapter(name, build, category=category, defaults=defaults, needs_truth="{truth}" in template)


def _randcommuns_argv(net, outdir, params):
    return [sys.executable, "-m", "clusterbench", "randcommuns", "--net", net,
            "--truth", params["truth"], "--seed", params.get("seed", 0),
            "--out", os.path.join(outdir, "level_0.cnl")]


class Registry:
    def __init__(self, adapters=()):
        self._adapters = {}
        for a in adapters:
            self.register(a)

    def register(self, adapter):
        if adapter.name in self._adapters:
            raise RegistryError(f"algorithm {adapter.name!r} is already registered")
        self._adapters[adapter.name] = adapter
        return adapter

    def lookup(self, name):
        try:
            return self._adapters[name]
        except KeyError:
            raise RegistryError(f"unknown algorithm {name!r}") from None

    def names(self):
        return sorted(self._adapters)

    def __contains__(self, name):
        return name in self._adapters


def default_registry():
    return Registry([AlgoAdapter("randcommuns", _randcommuns_argv, needs_truth=True, partial_cover=True)])


# ---------------------------------------------------------------- randcommuns

def randcommuns(net, truth, seed):
    """Random connected clusters shaped like the ground truth.

    Templates (one per ground-truth cluster size) are filled in a shuffled
    order. Each template starts at a random unused node and grows by
    breadth-first expansion over unused nodes, visiting neighbours in a
    shuffled order, until it reaches the template size or runs out of
    frontier. A node is used at most once, so with overlapping truth some
    templates stay empty and are dropped.
    """
    truth = truth if isinstance(truth, Clustering) else Clustering(truth)
    if len(truth) == 0 or net.n_nodes == 0:
        raise ValueError("randcommuns needs a non-empty network and ground truth")
    rng = np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)
    adj = net.adjacency()
    nodes = list(net.nodes)
    sizes = truth.sizes()

    used = set()
    unused_order = [nodes[i] for i in rng.permutation(len(nodes))]
    cursor = 0
    clusters = []
    for t in rng.permutation(len(sizes)):
        size = sizes[t]
        while cursor < len(unused_order) and unused_order[cursor] in used:
            cursor += 1
        if cursor >= len(unused_order):
            continue
        start = unused_order[cursor]
        used.add(start)
        members = [start]
        head = 0
        while head < len(members) and len(members) < size:
            nbrs = adj[members[head]]
            head += 1
            for i in rng.permutation(len(nbrs)):
                v = nbrs[i]
                if v in used:
                    continue
                used.add(v)
                members.append(v)
                if len(members) >= size:
                    break
        clusters.append(members)
    return Clustering(clusters)


# ----------------------------------------------------------- level unification

def level_indices(count, levels=DEFAULT_LEVELS):
    """Indices of the levels kept when ``count`` levels are unified to ``levels``.

    Uniform sampling ``round(i * (count - 1) / (levels - 1))`` with halves
    rounded up; all levels are kept when there are no more than ``levels``.
    """
    if count < 1:
        raise ValueError("no levels to unify")
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if count <= levels:
        return list(range(count))
    if levels == 1:
        return [0]
    span = levels - 1
    return [(2 * i * (count - 1) + span) // (2 * span) for i in range(levels)]


def unify_levels(level_files, levels=DEFAULT_LEVELS):
    """Select at most ``levels`` files, ordered finest to coarsest."""
    files = list(level_files)
    return [files[i] for i in level_indices(len(files), levels)]


def materialize_levels(raw_dir, dest_dir, levels=DEFAULT_LEVELS, collect=collect_cnl):
    """Lay out unified levels as ``dest_dir/level_<k>.cnl``.

    ``raw_dir`` holds the algorithm's own output and plays the role of the
    ``-orig`` store: it is kept (and the kept levels symlinked) only when
    levels had to be dropped, otherwise its files are moved into place and
    the directory removed. Returns the list of level paths.
    """
    raw_dir, dest_dir = Path(raw_dir), Path(dest_dir)
    found = collect(raw_dir)
    if not found:
        raise ValueError(f"no clustering levels in {raw_dir}")
    chosen = unify_levels(found, levels)
    if dest_dir.exists():
        shutil.rmtree(dest_dir)
    dest_dir.mkdir(parents=True)
    out = []
    keep_orig = len(chosen) < len(found)
    for k, src in enumerate(chosen):
        dst = dest_dir / f"level_{k}.cnl"
        if keep_orig:
            try:
                dst.symlink_to(os.path.relpath(src, dest_dir))
            except OSError:
                shutil.copyfile(src, dst)
        else:
            shutil.move(str(src), dst)
        out.append(dst)
    if not keep_orig:
        shutil.rmtree(raw_dir, ignore_errors=True)
    else:
        logger.info("%s: kept %d of %d levels, originals in %s", dest_dir, len(chosen), len(found), raw_dir)
    return out
