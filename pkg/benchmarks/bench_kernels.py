"""Time the numba and pure-numpy paths of each hot kernel on the same inputs.

    python benchmarks/bench_kernels.py [--repeat N]

The numba column excludes compilation (one warm-up call per kernel).
Outputs of the two paths are compared before timing.
"""
import argparse
import time

import numpy as np

from objlidar import _kernels
from objlidar.datagen import ray_directions
from objlidar.geometry import SensorConfig


def _best(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng):
    cfg = SensorConfig()
    n = 120_000
    pix = rng.integers(0, cfg.height * cfg.width, n)
    r = rng.uniform(1, 80, n)
    cell = rng.integers(0, 16 ** 3, 50_000)
    vals = rng.random(50_000)
    p = rng.normal(size=(2048, 4))
    q = rng.normal(size=(2048, 4))
    dirs = ray_directions(cfg).reshape(-1, 3)
    boxes = np.column_stack([
        rng.uniform(-30, 30, 12), rng.uniform(-30, 30, 12), np.full(12, -0.9),
        np.full(12, 1.8), np.full(12, 4.2), np.full(12, 1.6), rng.uniform(-np.pi, np.pi, 12),
    ])
    return {
        "scatter_nearest (120k pts -> 64x1024)": lambda b: _kernels.scatter_nearest(pix, r, cfg.height * cfg.width, b),
        "voxel_accumulate (50k pts, 16^3)": lambda b: _kernels.voxel_accumulate(cell, vals, 16 ** 3, b),
        "nn_sqdist (2048 x 2048)": lambda b: _kernels.nn_sqdist(p, q, b),
        "raycast (65k rays, 12 boxes)": lambda b: _kernels.raycast(dirs, boxes, -1.73, 80.0, True, b),
    }


def _same(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not _kernels.HAVE_NUMBA:
        print("numba is not installed; only the numpy path can be timed")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<40}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}  match")
    for name, fn in cases(rng).items():
        ref = fn("numpy")
        t_np = _best(lambda: fn("numpy"), args.repeat)
        if _kernels.HAVE_NUMBA:
            same = _same(ref, fn("numba"))  # also the warm-up call
            t_nb = _best(lambda: fn("numba"), args.repeat)
            print(f"{name:<40}{t_np * 1e3:>10.2f}{t_nb * 1e3:>10.2f}{t_np / t_nb:>8.1f}x  {same}")
        else:
            print(f"{name:<40}{t_np * 1e3:>10.2f}{'-':>10}{'-':>9}  -")


if __name__ == "__main__":
    main()
