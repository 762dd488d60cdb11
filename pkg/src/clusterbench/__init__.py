"""Benchmarking harness for graph clustering algorithms.

Runs external clustering programs over network corpora under CPU
affinity isolation, a memory watchdog and timeouts, profiles them,
evaluates their output with intrinsic and extrinsic quality measures and
aggregates everything per algorithm and network type.
"""
from .netdata import Clustering, Network

__version__ = "0.1.0"
__all__ = ["Clustering", "Network", "__version__"]
