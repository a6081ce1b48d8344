"""Timing comparison of the numba and pure-numpy kernel backends.

Run with `python benchmarks/bench_kernels.py`. The first numba call pays the
JIT compilation cost; it is excluded by a warmup pass.
"""

import argparse
import time

import numpy as np

from bulksim import attackplan as ap
from bulksim import soilfield as sf
from bulksim._accel import NUMBA_AVAILABLE


def timeit(fn, repeats):
    fn()  # warmup (JIT compile on the numba path)
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def bench_slump(n, repeats):
    rng = np.random.default_rng(0)
    f = sf.HeightField(rng.uniform(0, 4, (n, n)), 0.15, 0.15)
    rows = []
    for label, flag in (("numba", True), ("numpy", False)):
        if flag and not NUMBA_AVAILABLE:
            continue
        dt = timeit(lambda: sf.slump(f, 1.0, max_iters=200, use_numba=flag),
                    repeats)
        rows.append((f"slump {n}x{n}", label, dt))
    return rows


def bench_greedy(n, repeats):
    cfg = ap.GraspEnvConfig(
        grid_dims=(n, n), resolution=(0.15, 0.15),
        pile=sf.PileSpec(mean=(0.075 * n, 0.075 * n), skew=(1.0, -1.0),
                         scale=(1.4, 1.4), amplitude=2.2))
    f = sf.init_field(cfg.pile, cfg.grid_dims, cfg.resolution)
    rows = []
    for label, flag in (("numba", True), ("numpy", False)):
        if flag and not NUMBA_AVAILABLE:
            continue
        dt = timeit(lambda: ap.greedy_oracle(f, cfg.geometry,
                                             machine_xy=cfg.machine_position,
                                             use_numba=flag), repeats)
        rows.append((f"greedy scan {n}x{n}", label, dt))
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    rows = []
    for n in (40, 80):
        rows += bench_slump(n, args.repeats)
    for n in (40, 80):
        rows += bench_greedy(n, args.repeats)

    print(f"{'kernel':<20} {'backend':<8} {'ms/call':>10}")
    by_kernel = {}
    for kernel, backend, dt in rows:
        print(f"{kernel:<20} {backend:<8} {1000 * dt:>10.2f}")
        by_kernel.setdefault(kernel, {})[backend] = dt
    for kernel, d in by_kernel.items():
        if "numba" in d and "numpy" in d:
            print(f"{kernel}: numba speedup x{d['numpy'] / d['numba']:.1f}")


if __name__ == "__main__":
    main()
