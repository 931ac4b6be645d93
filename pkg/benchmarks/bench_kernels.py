#!/usr/bin/env python3
"""Time the hot kernels on both backends (numba JIT vs pure numpy).

Usage: python benchmarks/bench_kernels.py [--paths 200000] [--cells 500]

The numba path is warmed once before timing so compilation is not billed to
the measurement.  Running with DEFAULTABLE_NUMBA=0 does not change anything
here: both implementations are imported explicitly.
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from defaultable import _kernels as K  # noqa: E402


def timeit(fn, *args, repeat=5):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--paths", type=int, default=200000)
    ap.add_argument("--cells", type=int, default=500)
    args = ap.parse_args()

    rng = np.random.default_rng(12345)
    p, n = args.paths, args.cells

    ids = rng.integers(0, 8, size=p * 4).astype(np.int64)
    vals = rng.standard_normal(p * 4)
    counts = (rng.uniform(size=(p // 10, n)) < 0.01).astype(np.int64)
    flags = rng.uniform(size=(p // 10, n)) < 0.01
    occupied = rng.uniform(size=(p // 10, n)) < 0.02
    poisson_counts = rng.poisson(0.02, size=(p // 10, n)).astype(np.int64)
    states = rng.integers(0, 3, size=(p // 10, n)).astype(np.int64)
    events = rng.uniform(size=(p // 10, n)) < 0.01
    valid = rng.uniform(size=(p // 10, n)) < 0.9

    cases = [
        ("bucket_stats", lambda impl: impl.bucket_stats(ids, vals, 8)),
        ("bucket_stats_compensated",
         lambda impl: impl.bucket_stats_compensated(ids, vals, 8)),
        ("window_first_trigger",
         lambda impl: impl.window_first_trigger(counts, 50, 2, n - 50)),
        ("shift_collisions", lambda impl: impl.shift_collisions(flags, occupied, n)),
        ("spread_multiplicity", lambda impl: impl.spread_multiplicity(poisson_counts)),
        ("hazard_scan", lambda impl: impl.hazard_scan(states, events, valid, 3)),
    ]

    impls = [("numpy", K.numpy_impl)]
    if K.numba_impl is not None:
        impls.append(("numba", K.numba_impl))
        for _name, fn in cases:      # warm the JIT outside the timed region
            fn(K.numba_impl)
    else:
        print("numba unavailable; timing the numpy path only")

    print(f"{'kernel':28s}" + "".join(f"{name:>12s}" for name, _ in impls) + f"{'speedup':>10s}")
    for name, fn in cases:
        row = [timeit(fn, impl) for _iname, impl in impls]
        speedup = row[0] / row[-1] if len(row) > 1 else float("nan")
        print(f"{name:28s}" + "".join(f"{t * 1e3:10.2f}ms" for t in row)
              + f"{speedup:9.1f}x")


if __name__ == "__main__":
    main()
