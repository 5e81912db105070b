"""Property checks for the diffusion-BA analysis, runnable standalone.

* eigenvalue continuity of the plane cost along a pose path,
* the operation-count model of shell-by-shell BA versus joint BA,
* the covariance ordering between the two,
* the strong-inner-block regime of the one-step updates.
"""
from __future__ import annotations

import numpy as np

from .ba import BAProblem, FeatureAssociation, cluster_coordinate, derivatives, lm_solve, plane_cost
from .sim import room_ba_scene
from .spatial import dba_covariance_check, lemma2_counts, one_step_updates, refinement_rates


def room_problem(n_poses: int, points: int, sigma: float, seed: int, frozen=None) -> BAProblem:
    gt, obs = room_ba_scene(n_poses, points, sigma, seed)
    feats = [FeatureAssociation(f, {j: cluster_coordinate(o) for j, o in enumerate(per)})
             for f, per in enumerate(obs)]
    return BAProblem(gt, feats, frozen)


def continuity_check(seed: int = 0, steps=(1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8)) -> dict:
    """``|cost(x + h d) - cost(x)|`` for shrinking ``h`` along a random pose direction."""
    prob = room_problem(5, 30, 0.01, seed)
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(prob.n_poses, 6))
    c0 = plane_cost(prob)
    diffs = []
    for h in steps:
        moved = [p.retract(h * x) for p, x in zip(prob.poses, d)]
        diffs.append(abs(plane_cost(prob, moved) - c0))
    mono = all(b <= a for a, b in zip(diffs, diffs[1:]))
    return {"steps": list(steps), "diffs": diffs, "monotone": mono, "passed": mono}


def balanced_sizes(M: int, D: int) -> list[int]:
    base, extra = divmod(M, D)
    return [base + (1 if i < extra else 0) for i in range(D)]


def counts_check(M: int = 200, Ds=(1, 2, 3, 4, 8), M_f: int = 1000, seed: int = 0,
                 n_random: int = 200) -> dict:
    """Integer inequalities on random and balanced plans plus the cubic ratio."""
    rng = np.random.default_rng(seed)
    ok = True
    for _ in range(n_random):
        D = int(rng.integers(1, 10))
        cuts = np.sort(rng.choice(np.arange(1, M), size=D - 1, replace=False)) if D > 1 else []
        sizes = np.diff(np.concatenate([[0], cuts, [M]])).astype(int).tolist()
        ok &= sum(m * m for m in sizes) <= M * M and sum(m**3 for m in sizes) <= M**3
    ratios = {}
    for D in Ds:
        c = lemma2_counts(M_f, balanced_sizes(M, D))
        ratios[D] = c["dba"]["cubic"] / c["joint"]["cubic"]
    close = all(abs(r * D * D - 1.0) <= 0.2 for D, r in ratios.items())
    return {"integer_ok": bool(ok), "cubic_ratio": ratios, "passed": bool(ok and close)}


def covariance_instance(seed: int, sigma: float = 0.01, points: int = 20):
    """Converged noisy room problem and a random outer block (pose 0 is the gauge)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
    n = int(rng.integers(4, 8))
    prob = room_problem(n, points, sigma, seed)
    res = lm_solve(prob, max_iter=100, tol=1e-10)
    split = int(rng.integers(1, n - 1))
    return prob.with_poses(res.poses), list(range(split + 1, n))


def covariance_check(n_instances: int = 20, sigma: float = 0.01, tol: float = -1e-8) -> dict:
    margins = []
    for s in range(n_instances):
        prob, block1 = covariance_instance(s, sigma)
        margins.append(dba_covariance_check(prob, block1, sigma)["psd_margin"])
    return {"margins": margins, "min_margin": float(min(margins)),
            "passed": bool(min(margins) >= tol)}


def regime_check(seed: int = 0, factor: float = 100.0, mu: float = 1e-4) -> dict:
    """Scale the inner-block Hessian and compare rates and one-step updates."""
    prob = room_problem(8, 30, 0.01, seed)
    rng = np.random.default_rng(seed)
    init = [prob.poses[0]] + [p.retract(np.r_[rng.normal(0, 0.02, 3), rng.normal(0, 0.05, 3)])
                              for p in prob.poses[1:]]
    prob = prob.with_poses(init)
    der = derivatives(prob, prob.fixed_mask())
    i0, i1 = np.arange(6, 24), np.arange(24, 48)  # poses 1-3 inner, 4-7 outer
    rows = {}
    for f in (1.0, factor):
        H = der.H.copy()
        H[np.ix_(i0, i0)] *= f
        r = refinement_rates(H, der.J, i0, i1, mu)
        st = one_step_updates(H, der.J, i0, i1, mu)
        gap = np.linalg.norm(st["joint"] - st["dba"]) / np.linalg.norm(st["joint"])
        rows[f] = {"r_H": r.r_H, "r_J": r.r_J, "gap": float(gap)}
    drop_H = rows[1.0]["r_H"] / max(rows[factor]["r_H"], 1e-300)
    drop_J = rows[1.0]["r_J"] / max(rows[factor]["r_J"], 1e-300)
    return {"rows": rows, "drop_H": drop_H, "drop_J": drop_J,
            "passed": bool(drop_H >= 50 and drop_J >= 50 and rows[factor]["gap"] < 0.05)}


def run_all(n_instances: int = 20) -> dict:
    return {"continuity": continuity_check(), "counts": counts_check(),
            "covariance": covariance_check(n_instances), "regime": regime_check()}
