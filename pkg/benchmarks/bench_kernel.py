"""Compiled vs numpy derivative-assembly kernel.

    python benchmarks/bench_kernel.py [--poses 20 50 100] [--repeat 5]

Times ``derivatives`` (which spends most of its time outside the kernel) and
the bare ``assemble`` call on room problems of increasing size.
"""
import argparse
import time

import numpy as np

from lemonmap.ba import kernels
from lemonmap.ba.solver import _view_terms, _evaluate, derivatives, pack
from lemonmap.geom import stack_poses
from lemonmap.lemmas import room_problem


def best(f, repeat):
    out = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        f()
        out.append(time.perf_counter() - t0)
    return min(out)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--poses", type=int, nargs="+", default=[20, 50, 100])
    ap.add_argument("--points", type=int, default=50)
    ap.add_argument("--repeat", type=int, default=5)
    a = ap.parse_args()
    try:
        kernels.get_backend("cython")
    except ImportError:
        print("compiled kernel not built; only the numpy backend is available")
        return
    print(f"{'poses':>6} {'views':>7} {'asm py[ms]':>11} {'asm cy[ms]':>11} {'speedup':>8} "
          f"{'deriv py[ms]':>13} {'deriv cy[ms]':>13}")
    for n in a.poses:
        prob = room_problem(n, a.points, 0.01, 0)
        pk = pack(prob)
        R, t = stack_poses(prob.poses)
        st = _evaluate(pk, R, t)
        g, g1, g2, d, Q = (np.ascontiguousarray(x) for x in _view_terms(pk, st))
        coef = np.ascontiguousarray(np.tile([1.0, 1.0, -1e-4], (len(pk.feat_ids), 1)))
        vp = pk.view_pose.astype(np.int64)
        args = (pk.feat_ptr, vp, g, g1, g2, d, Q, coef, n)
        ref = kernels.get_backend("python")(*args)
        got = kernels.get_backend("cython")(*args)
        assert np.allclose(ref[1], got[1], rtol=1e-10, atol=1e-12)
        tp = best(lambda: kernels.get_backend("python")(*args), a.repeat)
        tc = best(lambda: kernels.get_backend("cython")(*args), a.repeat)
        dp = best(lambda: derivatives(prob, backend="python"), a.repeat)
        dc = best(lambda: derivatives(prob, backend="cython"), a.repeat)
        print(f"{n:>6} {len(vp):>7} {1e3 * tp:>11.2f} {1e3 * tc:>11.2f} {tp / tc:>8.1f} "
              f"{1e3 * dp:>13.2f} {1e3 * dc:>13.2f}")


if __name__ == "__main__":
    main()
