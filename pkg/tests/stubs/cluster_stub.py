"""Deterministic stand-in for a clustering algorithm.

Usage: cluster_stub.py NET OUTDIR SEED LEVELS
Reads the node ids of NET, sorts them, and writes LEVELS clusterings into
OUTDIR, level k grouping consecutive sorted ids into blocks of 2**(k+1).
The seed rotates the sorted order so different seeds give different output.
"""
import sys
from pathlib import Path

net, outdir, seed, levels = sys.argv[1], Path(sys.argv[2]), int(sys.argv[3]), int(sys.argv[4])
nodes = set()
for line in open(net):
    if line.strip() and not line.startswith("#"):
        a, b = line.split()[:2]
        nodes.update((a, b))
order = sorted(nodes, key=lambda v: (len(v), v))
shift = seed % len(order)
order = order[shift:] + order[:shift]
outdir.mkdir(parents=True, exist_ok=True)
for k in range(levels):
    size = 2 ** (k + 1)
    with open(outdir / f"lev{k}.cnl", "w") as fh:
        for i in range(0, len(order), size):
            fh.write(" ".join(order[i:i + size]) + "\n")
