"""Wall time of shell-by-shell (DBA) versus joint window BA.

    python benchmarks/bench_dba.py [--poses 200] [--D 1 2 4] [--repeat 2]
"""
import argparse
import time

import numpy as np

from lemonmap.metrics import ate_rmse
from lemonmap.sim import ba_benchmark_scene
from lemonmap.spatial import dba_optimize, joint_ba, plan_diffusion, window_from_poses


def perturb(poses, seed, rot=0.005, trans=0.03):
    rng = np.random.default_rng(seed)
    return {k: p.retract(np.r_[rng.normal(size=3) * rot, rng.normal(size=3) * trans])
            for k, p in poses.items()}


def best(f, repeat):
    times, out = [], None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = f()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--poses", type=int, default=200)
    ap.add_argument("--D", type=int, nargs="+", default=[1, 2, 4])
    ap.add_argument("--repeat", type=int, default=2)
    a = ap.parse_args()
    gt, scans, center = ba_benchmark_scene(a.poses)
    init = perturb(gt, 1)
    win = window_from_poses(center, 15.0, init)
    keys = list(win.members)

    tj, oj = best(lambda: joint_ba(keys, scans, init), a.repeat)
    ate = lambda out: ate_rmse({k: out[k] for k in keys}, {k: gt[k] for k in keys})  # noqa: E731
    print(f"M={len(keys)}  initial ATE {ate(init):.4f} m")
    print(f"joint          {tj:7.2f} s              ATE {ate(oj):.4f} m")
    for D in a.D:
        plan = plan_diffusion(win, center, D)
        td, od = best(lambda: dba_optimize(win, plan, scans, init), a.repeat)
        print(f"D={D} sizes={plan.sizes}  {td:7.2f} s  ratio {td / tj:.2f}  ATE {ate(od):.4f} m")


if __name__ == "__main__":
    main()
