"""Benchmark the numba kernels against their pure-numpy fallbacks.

Times the edge-list SpMV (forward and adjoint), the row scatter-add used
by the encoder, and the integer walk-count step, across graph sizes.
Run:

    python benchmarks/bench_kernels.py [--sizes 1000 10000 100000] [--repeats 20]
"""

import argparse
import time

import numpy as np

from kgexplain import kernels


def build_case(n_edges, seed=0, dim=16):
    rng = np.random.default_rng(seed)
    n = max(n_edges // 10, 16)
    src = rng.integers(0, n, n_edges).astype(np.int64)
    dst = rng.integers(0, n, n_edges).astype(np.int64)
    vals = rng.random(n_edges)
    u = rng.random(n)
    g = rng.random(n)
    rows = rng.random((n_edges, dim))
    counts = rng.integers(0, 3, n).astype(np.int64)
    return {
        "edge_spmv": (u, vals, src, dst, n),
        "edge_spmv_bw": (g, u, vals, src, dst),
        "scatter_add_rows": (rows, dst, n),
        "walk_step": (counts, src, dst, n),
    }


def time_call(fn, args, repeats):
    fn(*args)  # warm (JIT compile on the numba path)
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - t0) / repeats


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--sizes", type=int, nargs="+", default=[1000, 10000, 100000])
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()

    backends = kernels.available_backends()
    print(f"backends: {', '.join(backends)}")
    header = f"{'kernel':<18}{'edges':>9}" + "".join(f"{b + ' (ms)':>14}" for b in backends)
    if "numba" in backends:
        header += f"{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for n_edges in args.sizes:
        case = build_case(n_edges)
        for name, call_args in case.items():
            times = {
                b: time_call(kernels.impl(name, b), call_args, args.repeats)
                for b in backends
            }
            line = f"{name:<18}{n_edges:>9}" + "".join(
                f"{times[b] * 1e3:>14.3f}" for b in backends
            )
            if "numba" in times:
                line += f"{times['numpy'] / times['numba']:>9.1f}x"
            print(line)


if __name__ == "__main__":
    main()
