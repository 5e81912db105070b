"""Pose graphs: first and last pose-graph optimisation, recall iteration,
registration-covariance sparsification of BA constraints.

Residuals are ``e = Log(Z^-1 T_a^-1 T_b)`` with right-perturbation
Jacobians; the solver is sparse Levenberg-Marquardt with the anchor pose
removed from the unknowns.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve
from scipy.spatial import cKDTree

from .geom import (PointCloud, Pose, relative, se3_adjoint, se3_log_batch,
                   se3_right_jacobian_inv, stack_poses)
from .loops import LoopClosure, recall_loops

log = logging.getLogger(__name__)

EDGE_KINDS = ("odometry", "loop", "ba")
Key = tuple  # (robot_id, seq_index)


@dataclass(frozen=True, eq=False)
class GraphEdge:
    kind: str
    node_a: Key
    node_b: Key
    measurement: Pose
    information: np.ndarray

    def __post_init__(self):
        if self.kind not in EDGE_KINDS:
            raise ValueError(f"unknown edge kind {self.kind!r}")
        if tuple(self.node_a) == tuple(self.node_b):
            raise ValueError("edge endpoints must differ")
        info = np.asarray(self.information, dtype=float)
        if info.shape != (6, 6):
            raise ValueError("information must be 6x6")
        if not np.allclose(info, info.T, atol=1e-9):
            raise ValueError("information must be symmetric")
        if np.linalg.eigvalsh(info).min() < -1e-9:
            raise ValueError("information must be positive semi-definite")
        info = 0.5 * (info + info.T)
        info.setflags(write=False)
        object.__setattr__(self, "information", info)
        object.__setattr__(self, "node_a", tuple(self.node_a))
        object.__setattr__(self, "node_b", tuple(self.node_b))


@dataclass(eq=False)
class PoseGraph:
    nodes: dict
    edges: list
    anchor: Key

    def __post_init__(self):
        self.anchor = tuple(self.anchor)
        if self.anchor not in self.nodes:
            raise ValueError("anchor is not a graph node")
        for e in self.edges:
            if e.node_a not in self.nodes or e.node_b not in self.nodes:
                raise ValueError(f"edge {e.node_a}->{e.node_b} references a missing node")

    def edge_counts(self) -> dict:
        out = {k: 0 for k in EDGE_KINDS}
        for e in self.edges:
            out[e.kind] += 1
        return out

    def components(self) -> list[set]:
        adj = {k: [] for k in self.nodes}
        for e in self.edges:
            adj[e.node_a].append(e.node_b)
            adj[e.node_b].append(e.node_a)
        seen, comps = set(), []
        for s in sorted(self.nodes):
            if s in seen:
                continue
            comp = {s}
            q = deque([s])
            seen.add(s)
            while q:
                u = q.popleft()
                for v in adj[u]:
                    if v not in seen:
                        seen.add(v)
                        comp.add(v)
                        q.append(v)
            comps.append(comp)
        return comps


@dataclass
class GraphResult:
    poses: dict
    converged: bool
    iterations: int
    cost: float
    initial_cost: float


# --------------------------------------------------------------------------- #
# Solver
# --------------------------------------------------------------------------- #
def _edge_key(e: GraphEdge):
    return (e.node_a, e.node_b, e.kind, e.measurement.matrix().tobytes(), e.information.tobytes())


def _residuals(R, t, ia, ib, Zinv_R, Zinv_t):
    # T_a^-1 T_b
    Ra = R[ia].transpose(0, 2, 1)
    Rab = Ra @ R[ib]
    tab = np.einsum("nij,nj->ni", Ra, t[ib] - t[ia])
    Re = Zinv_R @ Rab
    te = np.einsum("nij,nj->ni", Zinv_R, tab) + Zinv_t
    return se3_log_batch(Re, te), Rab, tab


def _cost(e, L):
    return 0.5 * float(np.einsum("ni,nij,nj->", e, L, e))


def optimize_graph(graph: PoseGraph, max_iter: int = 100, tol: float = 1e-10,
                   mu0: float = 1e-6) -> GraphResult:
    """Sparse LM over all non-anchor nodes."""
    keys = sorted(graph.nodes)
    index = {k: i for i, k in enumerate(keys)}
    edges = sorted(graph.edges, key=_edge_key)
    R, t = stack_poses([graph.nodes[k] for k in keys])
    R, t = R.copy(), t.copy()
    n = len(keys)
    if not edges or n == 1:
        return GraphResult(dict(graph.nodes), True, 0, 0.0, 0.0)
    comps = graph.components()
    if len(comps) > 1:
        orphans = sorted({k[0] for c in comps if graph.anchor not in c for k in c})
        raise ValueError(f"pose graph is disconnected; robots without a path to the anchor: {orphans}")
    ia = np.array([index[e.node_a] for e in edges])
    ib = np.array([index[e.node_b] for e in edges])
    Zi = [e.measurement.inverse() for e in edges]
    Zinv_R = np.stack([z.rotation for z in Zi])
    Zinv_t = np.stack([z.translation for z in Zi])
    L = np.stack([e.information for e in edges])
    anchor = index[graph.anchor]
    free = np.array([i for i in range(n) if i != anchor])
    col = np.full(n, -1)
    col[free] = np.arange(len(free))

    def linearise(R, t):
        e, Rab, tab = _residuals(R, t, ia, ib, Zinv_R, Zinv_t)
        Jr = np.stack([se3_right_jacobian_inv(x) for x in e])
        # Ad(T_b^-1 T_a) = Ad((T_a^-1 T_b)^-1)
        Rba = Rab.transpose(0, 2, 1)
        tba = -np.einsum("nij,nj->ni", Rba, tab)
        Jb = Jr
        Ja = -Jr @ se3_adjoint(Rba, tba)
        return e, Ja, Jb

    def assemble(e, Ja, Jb):
        rows, cols, vals = [], [], []
        g = np.zeros(6 * len(free))
        for (i, J1), (j, J2) in [((ia, Ja), (ia, Ja)), ((ia, Ja), (ib, Jb)),
                                 ((ib, Jb), (ia, Ja)), ((ib, Jb), (ib, Jb))]:
            B = J1.transpose(0, 2, 1) @ L @ J2
            ok = (col[i] >= 0) & (col[j] >= 0)
            r6 = (6 * col[i][ok])[:, None, None] + np.arange(6)[None, :, None]
            c6 = (6 * col[j][ok])[:, None, None] + np.arange(6)[None, None, :]
            rows.append(np.broadcast_to(r6, B[ok].shape).ravel())
            cols.append(np.broadcast_to(c6, B[ok].shape).ravel())
            vals.append(B[ok].ravel())
        for i, J1 in ((ia, Ja), (ib, Jb)):
            gv = np.einsum("nji,njk,nk->ni", J1, L, e)
            ok = col[i] >= 0
            np.add.at(g.reshape(-1, 6), col[i][ok], gv[ok])
        H = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(6 * len(free), 6 * len(free))).tocsc()
        return H, g

    e, Ja, Jb = linearise(R, t)
    cost = c0 = _cost(e, L)
    mu = mu0
    converged = False
    it = 0
    eye = sp.identity(6 * len(free), format="csc")
    H, g = assemble(e, Ja, Jb)
    while it < max_iter:
        it += 1
        diag = H.diagonal()
        D = sp.diags(np.maximum(diag, 1e-12), format="csc")
        step = -spsolve(H + mu * D + 1e-12 * eye, g)
        if not np.all(np.isfinite(step)):
            mu *= 10
            continue
        Rn, tn = R.copy(), t.copy()
        for k, i in enumerate(free):
            xi = step[6 * k:6 * k + 6]
            T = Pose(R[i], t[i]).retract(xi)
            Rn[i], tn[i] = T.rotation, T.translation
        en, Jan, Jbn = linearise(Rn, tn)
        cn = _cost(en, L)
        if cn <= cost:
            small = np.linalg.norm(step) < tol or cost - cn <= 1e-15 * max(cost, 1e-300)
            R, t, cost = Rn, tn, cn
            e, Ja, Jb = en, Jan, Jbn
            H, g = assemble(e, Ja, Jb)
            mu = max(mu / 3, 1e-12)
            if small:
                converged = True
                break
        else:
            mu *= 4
            if mu > 1e10:
                break
    out = {}
    for i, k in enumerate(keys):
        p = graph.nodes[k]
        out[k] = p if i == anchor else Pose(R[i], t[i], p.robot_id, p.seq_index, p.timestamp)
    return GraphResult(out, converged, it, cost, c0)


# --------------------------------------------------------------------------- #
# FPGO
# --------------------------------------------------------------------------- #
def _loop_edges(loops: Iterable[LoopClosure], weight: float = 1.0) -> list[GraphEdge]:
    return [GraphEdge("loop", l.key_a, l.key_b, l.rel_transform, weight * np.eye(6))
            for l in sorted(loops, key=lambda l: l.id)]


def odometry_edges(odom: Mapping[int, Sequence[Pose]], weights=None) -> list[GraphEdge]:
    """Consecutive odometry constraints; ``weights[(key_a, key_b)]`` overrides the unit weight."""
    out = []
    for rid in sorted(odom):
        traj = odom[rid]
        for i in range(len(traj) - 1):
            a, b = (rid, i), (rid, i + 1)
            w = 1.0 if weights is None else weights[(a, b)]
            out.append(GraphEdge("odometry", a, b, relative(traj[i], traj[i + 1]), w * np.eye(6)))
    return out


def initial_alignment(odom: Mapping[int, Sequence[Pose]], loops: Sequence[LoopClosure]) -> dict:
    """World poses from chaining inter-robot loop transforms breadth-first from robot 0."""
    rids = sorted(odom)
    if not rids:
        raise ValueError("at least one robot is required")
    root = rids[0]
    offset = {root: Pose.identity()}
    by_robot = {r: [] for r in rids}
    for l in sorted(loops, key=lambda l: l.id):
        if l.is_inter:
            by_robot[l.robot_a].append(l)
            by_robot[l.robot_b].append(l)
    q = deque([root])
    while q:
        r = q.popleft()
        for l in by_robot[r]:
            other = l.robot_b if l.robot_a == r else l.robot_a
            if other in offset:
                continue
            if l.robot_a == r:
                wa = offset[r] @ odom[r][l.idx_a]
                wb = wa @ l.rel_transform
                offset[other] = wb @ odom[other][l.idx_b].inverse()
            else:
                wb = offset[r] @ odom[r][l.idx_b]
                wa = wb @ l.rel_transform.inverse()
                offset[other] = wa @ odom[other][l.idx_a].inverse()
            q.append(other)
    orphans = [r for r in rids if r not in offset]
    if orphans:
        raise ValueError(f"robots {orphans} have no inter-loop path to robot {root}")
    nodes = {}
    for r in rids:
        for i, p in enumerate(odom[r]):
            nodes[(r, i)] = (offset[r] @ p).with_meta(r, i, p.timestamp)
    return nodes


def build_fpgo(odom: Mapping[int, Sequence[Pose]], loops: Sequence[LoopClosure],
               initial: Mapping | None = None) -> PoseGraph:
    if not odom:
        raise ValueError("at least one robot is required")
    usable = [l for l in loops if l.status in ("accepted", "recalled")]
    nodes = initial_alignment(odom, usable) if initial is None else dict(initial)
    edges = odometry_edges(odom) + _loop_edges(usable)
    anchor = (min(odom), 0)
    return PoseGraph(nodes, edges, anchor)


@dataclass
class RecallTrace:
    passes: int
    counts: list = field(default_factory=list)  # usable loop count per pass


def fpgo_with_recall(odom: Mapping[int, Sequence[Pose]], loops: Sequence[LoopClosure],
                     dist_thresh: float = 2.0, max_passes: int = 10, mode: str = "relative",
                     recall: bool = True):
    """Alternate FPGO and loop recall until nothing new is recalled.

    Returns ``(poses, loops, trace)``; ``loops`` carries updated statuses.
    """
    cur = {l.id: l for l in loops}
    trace = RecallTrace(0)
    poses = None
    for _ in range(max_passes):
        trace.passes += 1
        usable = [l for l in cur.values() if l.status in ("accepted", "recalled")]
        trace.counts.append(len(usable))
        init = poses
        graph = build_fpgo(odom, usable, initial=init)
        poses = optimize_graph(graph).poses
        if not recall:
            break
        rejected = sorted((l for l in cur.values() if l.status == "rejected"), key=lambda l: l.id)
        new = recall_loops(rejected, poses, dist_thresh, mode)
        if not new:
            break
        for l in new:
            cur[l.id] = l
    out = [cur[k].with_center(poses) if cur[k].status in ("accepted", "recalled") else cur[k]
           for k in sorted(cur)]
    return poses, out, trace


# --------------------------------------------------------------------------- #
# Registration covariance and sparsification
# --------------------------------------------------------------------------- #
def registration_information(points: np.ndarray) -> np.ndarray:
    """``J^T J`` for stacked per-correspondence blocks ``[[-[P]x, 0], [0, I]]``."""
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    Om = np.zeros((6, 6))
    sq = np.einsum("ni,ni->", P, P)
    Om[:3, :3] = sq * np.eye(3) - P.T @ P
    Om[3:, 3:] = len(P) * np.eye(3)
    return Om


def registration_covariance(cloud_a: PointCloud, cloud_b: PointCloud, T_ab: Pose,
                            max_dist: float = 0.5, min_corr: int = 10, tree_a=None):
    """``(Omega, lambda_min)``; fewer than ``min_corr`` correspondences gives ``(0, 0)``."""
    pb = T_ab.transform_points(cloud_b.points)
    if len(cloud_a) == 0 or len(pb) == 0:
        return np.zeros((6, 6)), 0.0
    tree = cKDTree(cloud_a.points) if tree_a is None else tree_a
    d, _ = tree.query(pb, k=1, distance_upper_bound=max_dist)
    m = np.isfinite(d)
    if m.sum() < min_corr:
        return np.zeros((6, 6)), 0.0
    Om = registration_information(pb[m])
    return Om, float(max(np.linalg.eigvalsh(Om)[0], 0.0))


def _voxel_keys(pts: np.ndarray, voxel: float) -> np.ndarray:
    """Sorted unique packed voxel ids (21 bits per axis)."""
    v = np.floor(np.asarray(pts, dtype=float).reshape(-1, 3) / voxel).astype(np.int64) + (1 << 20)
    if len(v) and (v.min() < 0 or v.max() >= 1 << 21):
        raise ValueError("point coordinates out of range for voxel packing")
    return np.unique((v[:, 0] << 42) | (v[:, 1] << 21) | v[:, 2])


def _overlap(ka: np.ndarray, kb: np.ndarray) -> float:
    if len(ka) == 0 or len(kb) == 0:
        return 0.0
    return len(np.intersect1d(ka, kb, assume_unique=True)) / min(len(ka), len(kb))


def voxel_overlap(a: np.ndarray, b: np.ndarray, voxel: float = 0.5) -> float:
    """Shared occupied voxels over the smaller occupied set."""
    return _overlap(_voxel_keys(a, voxel), _voxel_keys(b, voxel))


@dataclass(frozen=True)
class SparsificationVerdict:
    node_a: Key
    node_b: Key
    lambda_min: float
    descriptor_sim: float
    retained: bool
    measurement: Pose | None = None
    constrained: bool = True


def sparsify_ba_constraints(poses: Mapping, scans: Mapping, sim_scores: Mapping | None = None,
                            lambda_thresh: float = 50.0, sim_thresh: float = 0.3,
                            literal_lambda_rule: bool = False, max_dist: float = 0.5,
                            overlap_voxel: float = 0.5) -> list[SparsificationVerdict]:
    """Pairwise verdicts over a BA window.

    Cross-robot pairs are kept when their submap similarity (voxel overlap)
    reaches ``sim_thresh``.  Same-robot pairs are kept when the registration
    information is well conditioned, ``lambda_min >= lambda_thresh``; with
    ``literal_lambda_rule`` the comparison flips to ``lambda_min <=
    lambda_thresh``.  Pairs with too few correspondences are never kept.
    """
    keys = sorted(poses)
    vox = {k: _voxel_keys(poses[k].transform_points(scans[k].points), overlap_voxel) for k in keys}
    trees = {k: cKDTree(scans[k].points) for k in keys if len(scans[k])}
    out = []
    for x, ka in enumerate(keys):
        for kb in keys[x + 1:]:
            T_ab = relative(poses[ka], poses[kb])
            if sim_scores is not None and (ka, kb) in sim_scores:
                sim = float(sim_scores[(ka, kb)])
            else:
                sim = _overlap(vox[ka], vox[kb])
            _, lam = registration_covariance(scans[ka], scans[kb], T_ab, max_dist,
                                             tree_a=trees.get(ka))
            constrained = lam > 0.0
            if ka[0] != kb[0]:
                keep = sim >= sim_thresh and sim > 0
            elif not constrained:
                keep = False
            elif literal_lambda_rule:
                keep = lam <= lambda_thresh
            else:
                keep = lam >= lambda_thresh
            out.append(SparsificationVerdict(ka, kb, lam, sim, bool(keep), T_ab, constrained))
    return out


# --------------------------------------------------------------------------- #
# LPGO
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class LPGOWeights:
    w_low: float = 1.0
    w_mid: float = 10.0
    w_high: float = 100.0
    w_ba: float = 100.0
    w_loop: float = 1.0


def odometry_weight(a_opt: bool, b_opt: bool, w: LPGOWeights) -> float:
    if a_opt and b_opt:
        return w.w_mid
    if a_opt or b_opt:
        return w.w_high
    return w.w_low


def build_lpgo(odom: Mapping[int, Sequence[Pose]], poses: Mapping, loops: Sequence[LoopClosure],
               ba_optimized: Iterable, verdicts: Sequence[SparsificationVerdict],
               weights: LPGOWeights = LPGOWeights()) -> PoseGraph:
    """Odometry edges weighted by BA membership, retained BA edges, and the FPGO loop edges.

    ``poses`` is the starting estimate (FPGO poses overwritten by BA results).
    """
    opt = set(map(tuple, ba_optimized))
    wmap = {}
    for rid in sorted(odom):
        for i in range(len(odom[rid]) - 1):
            a, b = (rid, i), (rid, i + 1)
            wmap[(a, b)] = odometry_weight(a in opt, b in opt, weights)
    edges = odometry_edges(odom, wmap)
    edges += _loop_edges([l for l in loops if l.status in ("accepted", "recalled")], weights.w_loop)
    for v in sorted(verdicts, key=lambda v: (v.node_a, v.node_b)):
        if v.retained:
            edges.append(GraphEdge("ba", v.node_a, v.node_b, v.measurement, weights.w_ba * np.eye(6)))
    return PoseGraph(dict(poses), edges, (min(odom), 0))
