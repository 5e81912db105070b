"""Spatial bundle adjustment around loops.

Isolated loops get diffusion BA: poses in a spherical window are grouped
into distance shells around the loop centre and optimised shell by shell,
with already-optimised shells frozen.  Clustered loops get a two-level
hierarchical BA over poses reordered along the principal axis of the
cluster.
"""
from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .ba import (BAProblem, FeatureAssociation, derivatives, extract_planes,
                 lm_solve, plane_cost)
from .ba.solver import _checked_inverse, cluster_sensitivities
from .geom import PointCloud, Pose, SpatialIndex, pca_principal_axis, voxel_downsample
from .loops import gicp_align

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BAParams:
    voxel: float = 1.0
    planarity_thresh: float = 0.01
    min_points: int = 30
    max_depth: int = 3
    min_points_per_view: int = 3
    downsample: float = 0.1
    mu0: float = 1e-4
    max_iter: int = 50
    tol: float = 1e-7
    null_tol: float | None = 1e-3
    # features are re-extracted at the solved poses and the solve repeated;
    # points of badly placed poses miss the planar voxels in the first round
    rounds: int = 2
    round_tol: float = 1e-4


@dataclass(frozen=True, eq=False)
class SpatialWindow:
    id: int
    center: np.ndarray
    radius: float
    members: tuple  # pose keys, deterministic order
    positions: np.ndarray  # member positions at construction time

    def __len__(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class DiffusionPlan:
    D: int
    radii: tuple
    groups: tuple  # tuple of tuples of pose keys

    def __post_init__(self):
        if self.D < 1 or len(self.groups) != self.D or len(self.radii) != self.D:
            raise ValueError("plan needs D groups and D radii")
        if any(b <= a for a, b in zip(self.radii, self.radii[1:])):
            raise ValueError("group radii must be strictly ascending")

    @property
    def sizes(self) -> list[int]:
        return [len(g) for g in self.groups]


@dataclass(frozen=True)
class RefinementRates:
    r_H: float
    r_J: float


# --------------------------------------------------------------------------- #
# Windows
# --------------------------------------------------------------------------- #
def build_window(center, radius: float, pose_index: SpatialIndex, keys: Sequence | None = None,
                 window_id: int = 0, min_poses: int = 4) -> SpatialWindow:
    if radius <= 0:
        raise ValueError("radius must be positive")
    ids = pose_index.radius_search(center, radius)
    if len(ids) < min_poses:
        raise ValueError(f"window too sparse: {len(ids)} poses within {radius} m")
    pos_of = dict(zip(pose_index.ids.tolist(), pose_index.positions))
    members = tuple(keys[i] for i in ids) if keys is not None else tuple(ids)
    if keys is not None:
        order = sorted(range(len(members)), key=lambda k: members[k])
        members = tuple(members[k] for k in order)
        ids = [ids[k] for k in order]
    pos = np.array([pos_of[i] for i in ids])
    return SpatialWindow(window_id, np.asarray(center, dtype=float), float(radius), members, pos)


def window_from_poses(center, radius: float, poses: Mapping, window_id: int = 0,
                      min_poses: int = 4) -> SpatialWindow:
    keys = sorted(poses)
    idx = SpatialIndex(np.array([poses[k].translation for k in keys]))
    return build_window(center, radius, idx, keys, window_id, min_poses)


def _sensor_clouds(keys, scans, downsample: float) -> dict:
    """Downsampled sensor-frame points; independent of the poses, so computed once."""
    out = {}
    for k in keys:
        pts = scans[k].points
        out[k] = pts[voxel_downsample(pts, downsample)] if downsample > 0 and len(pts) else pts
    return out


def _world_points(keys, poses, scans, downsample: float) -> list[np.ndarray]:
    out = []
    for k in keys:
        pts = scans[k].points
        if downsample > 0 and len(pts):
            pts = pts[voxel_downsample(pts, downsample)]
        out.append(poses[k].transform_points(pts))
    return out


def prealign_clusters(window: SpatialWindow, scans: Mapping, poses: Mapping,
                      downsample: float = 0.2, max_corr_dist: float = 1.0) -> dict:
    """Rigidly align each robot's window submap to the lowest-id robot's."""
    by_robot: dict[int, list] = {}
    for k in window.members:
        by_robot.setdefault(k[0], []).append(k)
    out = {k: poses[k] for k in window.members}
    if len(by_robot) < 2:
        return out
    rids = sorted(by_robot)

    def submap(keys):
        pts = np.concatenate(_world_points(keys, poses, scans, 0.0))
        return PointCloud(pts[voxel_downsample(pts, downsample)], "world")

    base = submap(by_robot[rids[0]])
    for r in rids[1:]:
        src = submap(by_robot[r])
        if len(src) < 50 or len(base) < 50:
            warnings.warn(f"robot {r}: too few points to prealign", RuntimeWarning)
            continue
        res = gicp_align(src, base, Pose.identity(), max_corr_dist=max_corr_dist)
        if not res.converged:
            warnings.warn(f"robot {r}: prealignment GICP did not converge; left unadjusted",
                          RuntimeWarning)
            continue
        for k in by_robot[r]:
            out[k] = (res.transform @ poses[k]).with_meta(*k, poses[k].timestamp)
    return out


def plan_diffusion(window: SpatialWindow, loop_center, D: int, poses: Mapping | None = None
                   ) -> DiffusionPlan:
    """Equal-width distance shells around ``loop_center``; empty shells are dropped."""
    if D < 1:
        raise ValueError("D must be >= 1")
    pos = window.positions if poses is None else np.array([poses[k].translation
                                                           for k in window.members])
    dist = np.linalg.norm(pos - np.asarray(loop_center, dtype=float), axis=1)
    edges = window.radius * np.arange(1, D + 1) / D
    edges[-1] = max(edges[-1], dist.max(initial=0.0))
    shell = np.searchsorted(edges, dist, side="left")
    shell = np.minimum(shell, D - 1)
    groups, radii = [], []
    for d in range(D):
        members = tuple(k for k, s in zip(window.members, shell) if s == d)
        if members:
            groups.append(members)
            radii.append(float(edges[d]))
    return DiffusionPlan(len(groups), tuple(radii), tuple(groups))


# --------------------------------------------------------------------------- #
# BA over pose subsets
# --------------------------------------------------------------------------- #
def window_problem(keys: Sequence, poses: Mapping, scans: Mapping, frozen: set | None = None,
                   gauge: bool = True, params: BAParams = BAParams(),
                   clouds: Mapping | None = None) -> BAProblem:
    """Extract plane features over ``keys`` at the current poses."""
    frozen = set() if frozen is None else frozen
    plist = [poses[k] for k in keys]
    if clouds is None:
        world = _world_points(keys, poses, scans, params.downsample)
    else:
        world = [poses[k].transform_points(clouds[k]) for k in keys]
    feats = extract_planes([PointCloud(w, "world") for w in world], plist, params.voxel,
                           params.planarity_thresh, params.min_points, params.max_depth,
                           params.min_points_per_view, min_views=2)
    mask = np.array([k in frozen for k in keys], dtype=bool)
    return BAProblem(plist, feats, mask, gauge=gauge or not mask.any())


def _solve(problem: BAProblem, params: BAParams):
    return lm_solve(problem, params.mu0, params.max_iter, params.tol, null_tol=params.null_tol)


def _solve_rounds(keys: list, poses: Mapping, scans: Mapping, frozen: set, gauge: bool,
                  params: BAParams, free: list | None = None, clouds: Mapping | None = None):
    """Extract-and-solve, repeated up to ``params.rounds`` times.

    With ``free`` given, every key outside it must be in ``frozen`` and the
    frozen views are folded into constants before solving.  Returns
    ``(poses, first_initial_cost, last_cost)``; ``None`` when no features
    are found in the first round.
    """
    cur = dict(poses)
    first = last = None
    fold = free is not None and len(free) < len(keys)
    solved = free if fold else keys
    if clouds is None:
        clouds = _sensor_clouds(keys, scans, params.downsample)
    for r in range(max(1, params.rounds)):
        prob = window_problem(keys, cur, scans, frozen, gauge=gauge, params=params,
                              clouds=clouds)
        if fold:
            prob = _stage_problem(prob, keys, free, frozen, gauge)
        if not prob.features:
            if r == 0:
                return None
            break
        res = _solve(prob, params)
        first = res.initial_cost if first is None else first
        last = res.cost
        moved = max(np.linalg.norm(a.translation - cur[k].translation)
                    for k, a in zip(solved, res.poses))
        cur.update(zip(solved, res.poses))
        if moved < params.round_tol:
            break
    return cur, first, last


@dataclass
class WindowReport:
    window_id: int
    method: str
    group_sizes: list
    cost_pre: float = float("nan")
    cost_post: float = float("nan")
    features: int = 0
    failed: bool = False
    reason: str = ""
    rates: dict | None = None
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_json(self, timing: bool = False) -> dict:
        d = dict(window_id=self.window_id, method=self.method, group_sizes=self.group_sizes,
                 cost_pre=self.cost_pre, cost_post=self.cost_post, features=self.features,
                 failed=self.failed, reason=self.reason, rates=self.rates, **self.extra)
        if timing:
            d["seconds"] = self.seconds
        return d


def _stage_problem(window_prob: BAProblem, keys: list, free: list, frozen: set,
                   gauge: bool) -> BAProblem:
    """Window features restricted to ``free`` and ``frozen`` poses.

    Frozen views are constant, so per feature they are summed in the world
    frame and attached to one frozen identity pose placed after the free
    poses; the stage then costs as much as its own shell.
    """
    col = {k: i for i, k in enumerate(free)}
    anchor = len(free)
    feats = []
    for f in window_prob.features:
        views, fixed, n_fixed = {}, None, 0
        for j, c in f.views.items():
            k = keys[j]
            if k in col:
                views[col[k]] = c
            elif k in frozen:
                w = c.transformed(window_prob.poses[j])
                fixed = w if fixed is None else fixed + w
                n_fixed += 1
        if not views or len(views) + n_fixed < 2:
            continue
        if fixed is not None:
            views[anchor] = fixed
        feats.append(FeatureAssociation(f.feature_id, views))
    poses = [window_prob.poses[keys.index(k)] for k in free]
    mask = [False] * len(free)
    if frozen:
        poses.append(Pose.identity())
        mask.append(True)
    return BAProblem(poses, feats, np.array(mask), gauge=gauge or not frozen)


def dba_optimize(window: SpatialWindow, plan: DiffusionPlan, scans: Mapping, poses: Mapping,
                 params: BAParams = BAParams(), report: WindowReport | None = None) -> dict:
    """Shell-by-shell BA; earlier shells are frozen, the first pose of group 0 fixes the gauge.

    On any failure the window's poses revert to their input values.
    """
    cur = {k: poses[k] for k in window.members}
    frozen: set = set()
    active: list = []
    costs = []
    clouds = _sensor_clouds(window.members, scans, params.downsample)
    try:
        for d, group in enumerate(plan.groups):
            active = active + list(group)
            if d == 0 and len(active) < 2:
                frozen |= set(group)  # a lone gauge pose has nothing to solve
                continue
            got = _solve_rounds(active, cur, scans, frozen, d == 0, params, free=list(group),
                                clouds=clouds)
            if got is None:
                raise RuntimeError(f"no plane features at stage {d}")
            solved, c_pre, c_post = got
            costs.append((c_pre, c_post))
            for k in group:
                cur[k] = solved[k]
            frozen |= set(group)
    except (RuntimeError, np.linalg.LinAlgError) as exc:
        log.warning("window %d failed: %s", window.id, exc)
        if report is not None:
            report.failed, report.reason = True, str(exc)
        return {k: poses[k] for k in window.members}
    if report is not None and costs:
        keys = list(window.members)
        report.cost_pre = plane_cost(window_problem(keys, poses, scans, params=params))
        report.cost_post = plane_cost(window_problem(keys, cur, scans, params=params))
        report.extra["stage_costs"] = costs
    return cur


def joint_ba(keys: Sequence, scans: Mapping, poses: Mapping, params: BAParams = BAParams(),
             frozen: set | None = None) -> dict:
    keys = list(keys)
    got = _solve_rounds(keys, {k: poses[k] for k in keys}, scans, frozen or set(), True, params)
    if got is None:
        raise RuntimeError("no plane features in window")
    return got[0]


# --------------------------------------------------------------------------- #
# Refinement rates and DBA vs joint diagnostics
# --------------------------------------------------------------------------- #
def refinement_rates(H: np.ndarray, J: np.ndarray, idx0, idx1, mu: float = 1e-4) -> RefinementRates:
    H00 = H[np.ix_(idx0, idx0)]
    H01 = H[np.ix_(idx0, idx1)]
    H11 = H[np.ix_(idx1, idx1)]
    I0 = np.eye(len(idx0))
    I1 = np.eye(len(idx1))
    K = np.linalg.solve(H00 + mu * I0, np.column_stack([H01, J[idx0]]))
    coupling_H = H01.T @ K[:, :-1]
    coupling_J = H01.T @ K[:, -1]
    r_H = np.linalg.norm(coupling_H) / np.linalg.norm(H11 + mu * I1)
    nJ1 = np.linalg.norm(J[idx1])
    r_J = 0.0 if nJ1 == 0 else np.linalg.norm(coupling_J) / nJ1
    return RefinementRates(float(r_H), float(r_J))


def lemma2_counts(M_f: int, sizes: Sequence[int]) -> dict:
    """Operation-count model for joint BA over ``sum(sizes)`` poses vs incremental groups."""
    sizes = [int(s) for s in sizes]
    M = sum(sizes)
    joint = {"linear": M_f * M, "quadratic": M_f * M**2, "cubic": M**3}
    dba = {"linear": M_f * sum(sizes), "quadratic": M_f * sum(m**2 for m in sizes),
           "cubic": sum(m**3 for m in sizes)}
    return {"joint": joint, "dba": dba, "joint_total": sum(joint.values()),
            "dba_total": sum(dba.values())}


def one_step_updates(H: np.ndarray, J: np.ndarray, idx0, idx1, mu: float = 1e-4) -> dict:
    """Block-1 LM step under joint BA (Schur complement) and under DBA."""
    H00 = H[np.ix_(idx0, idx0)] + mu * np.eye(len(idx0))
    H01 = H[np.ix_(idx0, idx1)]
    H11 = H[np.ix_(idx1, idx1)] + mu * np.eye(len(idx1))
    K = np.linalg.solve(H00, np.column_stack([H01, J[idx0]]))
    S = H11 - H01.T @ K[:, :-1]
    out = {"degenerate": False}
    try:
        out["joint"] = -np.linalg.solve(S, J[idx1] - H01.T @ K[:, -1])
    except np.linalg.LinAlgError:
        out["degenerate"] = True
        out["joint"] = np.full(len(idx1), np.nan)
    out["dba"] = -np.linalg.solve(H11, J[idx1])
    return out


def dba_vs_joint_report(problem: BAProblem, block1, mu: float = 1e-4,
                        group_sizes: Sequence[int] | None = None) -> dict:
    """One-step comparison at the current estimate; block 0 is every other free pose."""
    fixed = problem.fixed_mask()
    b1 = np.zeros(problem.n_poses, dtype=bool)
    b1[np.asarray(block1)] = True
    b0 = ~b1 & ~fixed
    b1 &= ~fixed
    der = derivatives(problem, fixed)
    i0 = (6 * np.flatnonzero(b0)[:, None] + np.arange(6)).reshape(-1)
    i1 = (6 * np.flatnonzero(b1)[:, None] + np.arange(6)).reshape(-1)
    steps = one_step_updates(der.H, der.J, i0, i1, mu)
    rates = refinement_rates(der.H, der.J, i0, i1, mu)
    sizes = list(group_sizes) if group_sizes is not None else [int(b0.sum()), int(b1.sum())]
    counts = lemma2_counts(len(problem.features), sizes)
    dj, dd = steps["joint"], steps["dba"]
    return {"delta_joint": dj, "delta_dba": dd, "r_H": rates.r_H, "r_J": rates.r_J,
            "relative_gap": float(np.linalg.norm(dj - dd) / max(np.linalg.norm(dj), 1e-300)),
            "cost": der.cost, "flops_estimate_joint": counts["joint_total"],
            "flops_estimate_DBA": counts["dba_total"], "counts": counts,
            "degenerate": steps["degenerate"]}


def dba_covariance_check(problem: BAProblem, block1, sigma: float, h: float = 1e-6) -> dict:
    """Block-1 covariance under joint BA versus DBA (block 0 frozen).

    Joint: bottom-right block of ``H^-1 (sum_all L S L^T) H^-1``.  DBA:
    ``H11^-1 (sum_{views of block-1 poses} L1 S L1^T) H11^-1``.
    """
    fixed = problem.fixed_mask()
    b1 = np.zeros(problem.n_poses, dtype=bool)
    b1[np.asarray(block1)] = True
    b1 &= ~fixed
    free = np.flatnonzero(~fixed)
    sel = (6 * free[:, None] + np.arange(6)).reshape(-1)
    in1 = np.repeat(b1[free], 6)
    i1 = sel[in1]
    n1 = len(i1)
    if sigma == 0:
        z = np.zeros((n1, n1))
        return {"sigma_dba": z, "sigma_joint": z, "psd_margin": 0.0}
    der = derivatives(problem, fixed)
    H = der.H[np.ix_(sel, sel)]
    try:
        Hinv = _checked_inverse(H)
        H11inv = _checked_inverse(der.H[np.ix_(i1, i1)])
        _checked_inverse(H[np.ix_(~in1, ~in1)]) if (~in1).any() else None
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"lemma preconditions unmet: {exc}") from None
    mid_joint = np.zeros((len(sel), len(sel)))
    mid_dba = np.zeros((n1, n1))
    for _, j, L, S in cluster_sensitivities(problem, fixed, h):
        Ls = L[sel]
        mid_joint += sigma**2 * Ls @ S @ Ls.T
        if b1[j]:
            L1 = L[i1]
            mid_dba += sigma**2 * L1 @ S @ L1.T
    joint = (Hinv @ mid_joint @ Hinv.T)[np.ix_(in1, in1)]
    dba = H11inv @ mid_dba @ H11inv.T
    joint, dba = 0.5 * (joint + joint.T), 0.5 * (dba + dba.T)
    margin = float(np.linalg.eigvalsh(joint - dba).min())
    return {"sigma_dba": dba, "sigma_joint": joint, "psd_margin": margin}


# --------------------------------------------------------------------------- #
# Spatial HBA
# --------------------------------------------------------------------------- #
def pca_order(keys: Sequence, positions: np.ndarray) -> list:
    """Keys sorted by projection on the principal axis, ties by key."""
    positions = np.asarray(positions, dtype=float)
    if len(keys) < 2:
        return list(keys)
    try:
        axis, _ = pca_principal_axis(positions)
    except ValueError:
        return sorted(keys)
    proj = positions @ axis
    order = sorted(range(len(keys)), key=lambda i: (round(float(proj[i]), 9), tuple(keys[i])))
    return [keys[i] for i in order]


def hba_windows(n: int, W: int, stride: int) -> list[tuple[int, int]]:
    if n <= W:
        return [(0, n)]
    starts = list(range(0, n - W + 1, stride))
    if starts[-1] + W < n:
        starts.append(n - W)
    return [(s, s + W) for s in starts]


def spatial_hba(keys: Sequence, scans: Mapping, poses: Mapping, W: int = 10, stride: int = 5,
                params: BAParams = BAParams(), report: WindowReport | None = None) -> dict:
    """Two-level hierarchical BA over PCA-ordered poses.

    Level 1 solves overlapping local windows of ``W`` poses.  Level 2 treats
    each local window as a rigid aggregated cloud attached to its first pose
    and solves for those anchor poses.  Every pose is written back through
    the first local window that contains it.
    """
    order = pca_order(list(keys), np.array([poses[k].translation for k in keys]))
    if len(order) <= W:
        out = joint_ba(order, scans, poses, params)
        if report is not None:
            report.extra["fallback"] = "joint"
        return out
    spans = hba_windows(len(order), W, stride)
    local = []
    for a, b in spans:
        ks = order[a:b]
        got = _solve_rounds(ks, {k: poses[k] for k in ks}, scans, set(), True, params)
        local.append({k: poses[k] for k in ks} if got is None else got[0])
    # level 2: one node per local window, cloud in the anchor's frame
    anchors, clouds, top_poses = [], {}, {}
    for w, (a, b) in enumerate(spans):
        ks = order[a:b]
        anchor_local = local[w][ks[0]]
        inv = anchor_local.inverse()
        pts = []
        for k in ks:
            s = scans[k].points
            if params.downsample > 0 and len(s):
                s = s[voxel_downsample(s, params.downsample)]
            pts.append((inv @ local[w][k]).transform_points(s))
        node = ("hba", w)
        anchors.append(node)
        clouds[node] = np.concatenate(pts)
        top_poses[node] = poses[ks[0]]
    prob = window_problem(anchors, top_poses, None, gauge=True, params=params, clouds=clouds)
    if prob.features:
        top = dict(zip(anchors, _solve(prob, params).poses))
    else:
        top = top_poses
    out = {}
    for w, (a, b) in enumerate(spans):
        ks = order[a:b]
        inv = local[w][ks[0]].inverse()
        for k in ks:
            if k in out:
                continue
            out[k] = (top[anchors[w]] @ (inv @ local[w][k])).with_meta(*k, poses[k].timestamp)
    if report is not None:
        report.extra["hba_windows"] = len(spans)
    return out


# --------------------------------------------------------------------------- #
# Window driver
# --------------------------------------------------------------------------- #
def run_window(window: SpatialWindow, loop_center, scans: Mapping, poses: Mapping, kind: str,
               D: int = 3, W: int = 10, stride: int = 5, params: BAParams = BAParams(),
               prealign: bool = True) -> tuple[dict, WindowReport]:
    """Prealign, then DBA (isolated) or spatial HBA (clustered) for one window."""
    t0 = time.perf_counter()
    cur = prealign_clusters(window, scans, poses) if prealign else {k: poses[k]
                                                                    for k in window.members}
    if kind == "isolated":
        plan = plan_diffusion(window, loop_center, D, cur)
        rep = WindowReport(window.id, "dba", plan.sizes)
        out = dba_optimize(window, plan, scans, cur, params, rep)
    else:
        rep = WindowReport(window.id, "hba", [len(window)])
        try:
            pre = window_problem(list(window.members), cur, scans, gauge=True, params=params)
            rep.cost_pre = plane_cost(pre)
            out = spatial_hba(list(window.members), scans, cur, W, stride, params, rep)
            post = window_problem(list(window.members), out, scans, gauge=True, params=params)
            rep.cost_post = plane_cost(post)
        except (RuntimeError, np.linalg.LinAlgError, ValueError) as exc:
            rep.failed, rep.reason = True, str(exc)
            out = {k: poses[k] for k in window.members}
    rep.seconds = time.perf_counter() - t0
    return out, rep
