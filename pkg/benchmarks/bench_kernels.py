"""Compiled vs numpy voxel traversal kernels.

    python benchmarks/bench_kernels.py [--views N] [--repeat R]

Times forward and back projection of a 64^3 volume (3 mm voxels) for N views
on the default 128 x 128 detector, checks that both backends agree, and prints
rays per second for each.
"""

import argparse
import time

import numpy as np

from trajsim import _kernels_py, kernels
from trajsim.geometry import CArmPose
from trajsim.planner import planar_trajectory
from trajsim.recon import ReconVolume, SystemOperator


def _best(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--views", type=int, default=4)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    try:
        from trajsim import _kernels as compiled
    except ImportError:
        compiled = None
        print("compiled extension not built; only the numpy fallback is timed")

    geo = ReconVolume.centered(64, 3.0)
    poses = planar_trajectory().poses(CArmPose(0.0, 90.0))[: args.views]
    op = SystemOperator(poses, geo)
    vol = np.random.default_rng(0).uniform(0, 0.02, geo.dims)
    vals = np.random.default_rng(1).normal(size=op.starts.shape[0])
    n_rays = op.starts.shape[0]

    impls = [("numpy", _kernels_py)] + ([("cython", compiled)] if compiled else [])
    rows, outs = [], {}
    for name, impl in impls:
        tf, fwd = _best(lambda: kernels.forward(vol, geo.origin_mm, geo.voxel_mm, op.starts, op.ends, impl=impl), args.repeat)
        tb, bck = _best(lambda: kernels.back(vals, geo.dims, geo.origin_mm, geo.voxel_mm, op.starts, op.ends, impl=impl), args.repeat)
        outs[name] = (fwd, bck)
        rows.append((name, tf, tb))

    print(f"{n_rays} rays ({args.views} views x 128 x 128) through a 64^3 volume, best of {args.repeat}")
    print(f"{'backend':>8} {'forward s':>10} {'back s':>10} {'fwd Mray/s':>11} {'back Mray/s':>12}")
    for name, tf, tb in rows:
        print(f"{name:>8} {tf:10.3f} {tb:10.3f} {n_rays / tf / 1e6:11.2f} {n_rays / tb / 1e6:12.2f}")
    if len(rows) == 2:
        print(f"speedup: forward {rows[0][1] / rows[1][1]:.1f}x, back {rows[0][2] / rows[1][2]:.1f}x")
        df = np.max(np.abs(outs["numpy"][0] - outs["cython"][0])) / np.max(np.abs(outs["numpy"][0]))
        db = np.max(np.abs(outs["numpy"][1] - outs["cython"][1])) / np.max(np.abs(outs["numpy"][1]))
        print(f"max relative difference: forward {df:.1e}, back {db:.1e}")


if __name__ == "__main__":
    main()
