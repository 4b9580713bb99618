"""Time each kernel in its numpy and numba forms, plus the frozen regression forward.

Usage: python benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import time

import numpy as np

from lidarodom import kernels
from lidarodom.data import sim
from lidarodom.encoder import GridSpec, encode
from lidarodom.odom import RegressionModel, predict_regression


def best_of(func, args, repeat):
    func(*args)  # warm-up, includes numba compilation
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        func(*args)
        times.append(time.perf_counter() - t)
    return min(times)


def kernel_cases():
    rng = np.random.default_rng(0)
    world = sim.random_world(0, n_boxes=80)
    cloud = sim.scan_at(world, np.eye(4))
    idx = rng.integers(0, 64 * 360, size=len(cloud.xyz))
    feats = rng.normal(size=(len(idx), 3))
    values = rng.normal(size=(64, 360, 3))
    mask = rng.random((64, 360)) < 0.6
    x = rng.normal(size=(8, 16, 64, 360)).astype(np.float32)
    _, arg = kernels.maxpool_forward_np(x)
    g = rng.normal(size=(8, 16, 32, 180)).astype(np.float32)
    az = np.tile(np.linspace(-180, 180, 1800, endpoint=False), 64)
    dirs = world.ray_directions()
    lo, hi = world.box_bounds()
    return {
        "bin_accumulate": (idx, feats, 64 * 360),
        "interpolate_rows": (values, mask),
        "maxpool_forward": (x,),
        "maxpool_backward": (g, arg, x.shape),
        "ring_scan": (az, 90.0),
        "ray_cast": (np.zeros(3), dirs, lo, hi, float(world.ground_y), float(world.max_range)),
    }, cloud


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()

    cases, cloud = kernel_cases()
    print(f"{'kernel':<18} {'numpy ms':>10} {'numba ms':>10} {'speed-up':>9}")
    for name, call_args in cases.items():
        t_np = best_of(getattr(kernels, f"{name}_np"), call_args, args.repeat)
        t_jit = best_of(getattr(kernels, f"{name}_jit"), call_args, args.repeat)
        print(f"{name:<18} {t_np * 1e3:10.3f} {t_jit * 1e3:10.3f} {t_np / t_jit:9.2f}")

    grid = GridSpec.regression()
    t_enc = best_of(encode, (cloud, grid), args.repeat)
    frames = [encode(cloud, grid)] * 2
    model = RegressionModel(1, dtype=np.float32).initialize(0)
    t_fwd = best_of(predict_regression, (model, frames), args.repeat)
    print(f"encode 64x360: {t_enc * 1e3:.1f} ms, regression forward N=1 float32: {t_fwd * 1e3:.1f} ms")


if __name__ == "__main__":
    main()
