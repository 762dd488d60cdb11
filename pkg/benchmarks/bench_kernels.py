"""Time the numba and numpy kernels behind omega and F1 on random overlapping clusterings.

Usage: python benchmarks/bench_kernels.py [--nodes N] [--clusters K] [--repeat R]

Prints one line per kernel and size with the best-of-R time of each backend
and checks that both backends return identical arrays. The first numba call
(compilation or cache load) is timed separately.
"""
import argparse
import time

import numpy as np

from clusterbench import _kernels
from clusterbench._kernels_nb import best_match_f1_numba, cooccurrence_numba


def random_csr(rng, n, k, mean_size):
    sizes = np.minimum(np.maximum(1, rng.poisson(mean_size, size=k)), n)
    ptr = np.zeros(k + 1, dtype=np.int64)
    np.cumsum(sizes, out=ptr[1:])
    idx = np.concatenate([np.sort(rng.choice(n, size=s, replace=False)) for s in sizes]).astype(np.int64)
    return ptr, idx


def best_of(fn, repeat):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def same(a, b):
    if isinstance(a, tuple):
        return all(np.array_equal(x, y) for x, y in zip(a, b))
    return np.array_equal(a, b)


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--nodes", type=int, nargs="+", default=[2_000, 20_000, 100_000])
    ap.add_argument("--clusters", type=int, default=0, help="default: nodes / 20")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    warm = random_csr(rng, 100, 5, 10)
    t0 = time.perf_counter()
    best_match_f1_numba(*warm, *warm, 100)
    cooccurrence_numba(*warm, 100)
    print(f"numba first call (compile or cache load): {time.perf_counter() - t0:.3f} s")
    print(f"{'kernel':<14}{'nodes':>9}{'members':>10}{'numpy s':>11}{'numba s':>11}{'speedup':>9}  equal")

    for n in args.nodes:
        k = args.clusters or max(1, n // 20)
        a = random_csr(rng, n, k, 25)
        b = random_csr(rng, n, k, 25)
        cases = [
            ("best_match_f1", lambda: _kernels.best_match_f1_numpy(*a, *b, n),
             lambda: best_match_f1_numba(*a, *b, n)),
            ("cooccurrence", lambda: _kernels.cooccurrence_numpy(*a, n), lambda: cooccurrence_numba(*a, n)),
        ]
        for name, np_fn, nb_fn in cases:
            t_np, r_np = best_of(np_fn, args.repeat)
            t_nb, r_nb = best_of(nb_fn, args.repeat)
            print(f"{name:<14}{n:>9}{len(a[1]):>10}{t_np:>11.4f}{t_nb:>11.4f}{t_np / t_nb:>9.2f}  {same(r_np, r_nb)}")


if __name__ == "__main__":
    main()
