"""Loop processing: outlier rejection, classification and recall.

Rejection runs statistical outlier removal, plane-to-plane GICP seeded with
the candidate transform, then RANSAC over the final correspondences.
Accepted loops are grouped by breadth-first region growing over their
centres; loops rejected earlier are recalled when a globally optimised pose
set agrees with their transform.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geom import PointCloud, Pose, hat, kabsch, pose_error, se3_exp

log = logging.getLogger(__name__)

STATUSES = ("raw", "accepted", "rejected", "recalled")
_TRANSITIONS = {("raw", "accepted"), ("raw", "rejected"), ("rejected", "recalled")}


@dataclass(frozen=True, eq=False)
class LoopClosure:
    id: int
    robot_a: int
    idx_a: int
    robot_b: int
    idx_b: int
    rel_transform: Pose
    fitness: float = float("inf")
    inlier_count: int = 0
    status: str = "raw"
    cluster_id: int | None = None
    center: np.ndarray | None = None
    gt_valid: bool | None = None
    reason: str = ""

    def __post_init__(self):
        if (self.robot_a, self.idx_a) == (self.robot_b, self.idx_b):
            raise ValueError("a loop must connect two distinct poses")
        if self.status not in STATUSES:
            raise ValueError(f"unknown loop status {self.status!r}")

    @property
    def key_a(self) -> tuple[int, int]:
        return (self.robot_a, self.idx_a)

    @property
    def key_b(self) -> tuple[int, int]:
        return (self.robot_b, self.idx_b)

    @property
    def is_inter(self) -> bool:
        return self.robot_a != self.robot_b

    def transition(self, status: str, **changes) -> "LoopClosure":
        if (self.status, status) not in _TRANSITIONS:
            raise ValueError(f"illegal loop status change {self.status} -> {status}")
        return replace(self, status=status, **changes)

    def with_center(self, poses: Mapping) -> "LoopClosure":
        c = 0.5 * (poses[self.key_a].translation + poses[self.key_b].translation)
        return replace(self, center=c)


@dataclass(frozen=True)
class LoopCluster:
    id: int
    members: tuple[int, ...]
    kind: str

    def __post_init__(self):
        if (self.kind == "isolated") != (len(self.members) == 1):
            raise ValueError("isolated clusters have exactly one member")


@dataclass(frozen=True)
class LoopParams:
    sor_k: int = 16
    sor_std_mult: float = 1.0
    gicp_max_iter: int = 50
    gicp_conv_tol: float = 1e-6
    gicp_max_corr_dist: float = 1.0
    gicp_cov_k: int = 20
    gicp_epsilon: float = 1e-3
    ransac_iter: int = 200
    ransac_dist: float = 0.3
    min_inliers: int = 100
    max_fitness: float = 0.5
    # GICP must stay near the candidate transform; a large correction means it
    # slid into another basin (common in self-similar corridors).
    max_correction_trans: float = 0.5
    max_correction_rot: float = float(np.deg2rad(5.0))
    # inliers over the smaller filtered cloud; self-similar corridors give
    # wrong alignments that still match the walls but not the clutter
    min_inlier_ratio: float = 0.75
    seed: int = 0


# --------------------------------------------------------------------------- #
# Statistical outlier removal
# --------------------------------------------------------------------------- #
def sor_filter(cloud: PointCloud, k: int = 16, std_mult: float = 1.0) -> PointCloud:
    """Drop points whose mean k-NN distance exceeds ``mean + std_mult * std``."""
    if k < 1 or std_mult <= 0:
        raise ValueError("k must be >= 1 and std_mult > 0")
    n = len(cloud)
    if n <= k:
        return cloud
    d, _ = cKDTree(cloud.points).query(cloud.points, k=k + 1)
    mean_d = d[:, 1:].mean(axis=1)
    thresh = mean_d.mean() + std_mult * mean_d.std()
    return cloud.subset(mean_d <= thresh)


# --------------------------------------------------------------------------- #
# GICP
# --------------------------------------------------------------------------- #
def plane_covariances(points: np.ndarray, k: int = 20, epsilon: float = 1e-3,
                      tree: cKDTree | None = None) -> np.ndarray:
    """Per-point covariances with local-plane shape ``diag(1, 1, epsilon)``."""
    tree = cKDTree(points) if tree is None else tree
    k = min(k, len(points))
    _, idx = tree.query(points, k=k)
    nb = points[idx]
    nb = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nb, nb) / k
    _, vecs = np.linalg.eigh(cov)
    shape = np.array([epsilon, 1.0, 1.0])
    return np.einsum("nij,j,nkj->nik", vecs, shape, vecs)


@dataclass
class GicpResult:
    transform: Pose
    fitness: float
    converged: bool
    iterations: int
    correspondences: int = 0


def correspondences(src: np.ndarray, dst_tree: cKDTree, T: np.ndarray, max_dist: float):
    q = src @ T[:3, :3].T + T[:3, 3]
    d, j = dst_tree.query(q, k=1, distance_upper_bound=max_dist)
    m = np.isfinite(d)
    return np.flatnonzero(m), j[m], q


def gicp_align(src: PointCloud, dst: PointCloud, init: Pose | None = None, max_iter: int = 50,
               conv_tol: float = 1e-6, max_corr_dist: float = 1.0, cov_k: int = 20,
               epsilon: float = 1e-3, churn_tol: float = 0.01) -> GicpResult:
    """Plane-to-plane GICP estimating ``T`` with ``T @ src ~ dst``.

    Fitness is the mean Mahalanobis-whitened squared residual over the final
    correspondences (lower is better).
    """
    if len(src) < 50 or len(dst) < 50:
        raise ValueError("GICP needs at least 50 points per cloud")
    sp, dp = src.points, dst.points
    dtree = cKDTree(dp)
    Cs = src.per_point_cov if src.per_point_cov is not None else plane_covariances(sp, cov_k, epsilon)
    Cd = dst.per_point_cov if dst.per_point_cov is not None else plane_covariances(dp, cov_k, epsilon,
                                                                                    dtree)
    T = np.eye(4) if init is None else init.matrix()
    converged = False
    prev = np.full(len(sp), -1)
    it = 0
    # Gauss-Newton to convergence on a frozen correspondence set, then
    # re-associate.  Nearest-neighbour flips of sparse far points keep the
    # pose wandering at the mm level, so a re-association that changes fewer
    # than ``churn_tol`` of the pairs counts as stable.
    while it < max_iter and not converged:
        i, j, q = correspondences(sp, dtree, T, max_corr_dist)
        if len(i) < 6:
            break
        assoc = np.full(len(sp), -1)
        assoc[i] = j
        stable = np.count_nonzero(assoc != prev) <= churn_tol * len(i)
        prev = assoc
        for _ in range(10):
            it += 1
            q = sp[i] @ T[:3, :3].T + T[:3, 3]
            R = T[:3, :3]
            M = np.linalg.inv(Cd[j] + R @ Cs[i] @ R.T)
            r = dp[j] - q
            Jq = np.zeros((len(i), 3, 6))
            Jq[:, :, :3] = hat(q)
            Jq[:, :, 3:] = -np.eye(3)
            JtM = np.einsum("nki,nkl->nil", Jq, M)
            H = np.einsum("nil,nlj->ij", JtM, Jq)
            g = np.einsum("nil,nl->i", JtM, r)
            try:
                delta = -np.linalg.solve(H, g)
            except np.linalg.LinAlgError:
                it = max_iter
                break
            T = se3_exp(delta) @ T
            small = np.linalg.norm(delta) < conv_tol
            if small or it >= max_iter:
                break
        if stable and small:
            converged = True
    i, j, q = correspondences(sp, dtree, T, max_corr_dist)
    if len(i) == 0:
        return GicpResult(Pose.from_matrix(T), float("inf"), False, it, 0)
    R = T[:3, :3]
    M = np.linalg.inv(Cd[j] + R @ Cs[i] @ R.T)
    r = dp[j] - q[i]
    fitness = float(np.einsum("ni,nij,nj->n", r, M, r).mean())
    return GicpResult(Pose.from_matrix(T), fitness, converged, it, len(i))


# --------------------------------------------------------------------------- #
# RANSAC correspondence rejection
# --------------------------------------------------------------------------- #
def ransac_inliers(src: np.ndarray, dst: np.ndarray, n_iter: int = 200, dist_thresh: float = 0.3,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Boolean inlier mask of the best 3-point rigid hypothesis."""
    n = len(src)
    if n < 3:
        return np.zeros(n, dtype=bool)
    rng = np.random.default_rng(0) if rng is None else rng
    best = np.zeros(n, dtype=bool)
    for _ in range(n_iter):
        s = rng.choice(n, size=3, replace=False)
        a = src[s]
        if np.linalg.norm(np.cross(a[1] - a[0], a[2] - a[0])) < 1e-9:
            continue
        R, t = kabsch(a, dst[s])
        inl = np.linalg.norm(src @ R.T + t - dst, axis=1) < dist_thresh
        if inl.sum() > best.sum():
            best = inl
            if best.all():
                break
    return best


def validate_loop(loop: LoopClosure, cloud_a: PointCloud | None, cloud_b: PointCloud | None,
                  params: LoopParams = LoopParams()) -> LoopClosure:
    """Accept or reject a raw candidate by SOR + GICP + RANSAC."""
    if loop.status != "raw":
        raise ValueError("only raw loops can be validated")
    if cloud_a is None or cloud_b is None or len(cloud_a) == 0 or len(cloud_b) == 0:
        return loop.transition("rejected", reason="no data")
    fa = sor_filter(cloud_a, params.sor_k, params.sor_std_mult)
    fb = sor_filter(cloud_b, params.sor_k, params.sor_std_mult)
    if len(fa) < 50 or len(fb) < 50:
        return loop.transition("rejected", reason="too few points")
    res = gicp_align(fb, fa, loop.rel_transform, params.gicp_max_iter, params.gicp_conv_tol,
                     params.gicp_max_corr_dist, params.gicp_cov_k, params.gicp_epsilon)
    i, j, q = correspondences(fb.points, cKDTree(fa.points), res.transform.matrix(),
                              params.gicp_max_corr_dist)
    rng = np.random.default_rng(np.random.SeedSequence([params.seed, loop.id]))
    inl = ransac_inliers(q[i], fa.points[j], params.ransac_iter, params.ransac_dist, rng)
    n_inl = int(inl.sum())
    min_inl = params.min_inliers
    smallest = min(len(fa), len(fb))
    if smallest < 10 * params.min_inliers:
        min_inl = min(min_inl, int(np.ceil(0.1 * smallest)))
    dt, dr = pose_error(loop.rel_transform, res.transform)
    near = dt <= params.max_correction_trans and dr <= params.max_correction_rot
    ratio = n_inl / smallest
    ok = (res.converged and n_inl >= min_inl and ratio >= params.min_inlier_ratio
          and res.fitness <= params.max_fitness and near)
    if ok:
        return loop.transition("accepted", rel_transform=res.transform, fitness=res.fitness,
                               inlier_count=n_inl, reason="")
    why = []
    if not res.converged:
        why.append("gicp not converged")
    if n_inl < min_inl:
        why.append(f"inliers {n_inl} < {min_inl}")
    if ratio < params.min_inlier_ratio:
        why.append(f"inlier ratio {ratio:.2f} < {params.min_inlier_ratio}")
    if res.fitness > params.max_fitness:
        why.append(f"fitness {res.fitness:.3g} > {params.max_fitness}")
    if not near:
        why.append(f"correction {dt:.2f} m / {np.degrees(dr):.1f} deg too large")
    return loop.transition("rejected", fitness=res.fitness, inlier_count=n_inl, reason="; ".join(why))


# --------------------------------------------------------------------------- #
# Classification
# --------------------------------------------------------------------------- #
def classify_loops(accepted: Sequence[LoopClosure], radius: float) -> list[LoopCluster]:
    """Breadth-first region growing over loop centres."""
    loops = sorted(accepted, key=lambda l: l.id)
    if not loops:
        return []
    if any(l.center is None for l in loops):
        raise ValueError("every loop needs a center before classification")
    centers = np.array([l.center for l in loops])
    tree = cKDTree(centers)
    seen = np.zeros(len(loops), dtype=bool)
    groups = []
    for s in range(len(loops)):
        if seen[s]:
            continue
        seen[s] = True
        comp = [s]
        queue = deque([s])
        while queue:
            u = queue.popleft()
            for v in sorted(tree.query_ball_point(centers[u], radius)):
                if not seen[v]:
                    seen[v] = True
                    comp.append(v)
                    queue.append(v)
        groups.append(sorted(loops[k].id for k in comp))
    groups.sort(key=lambda g: g[0])
    return [LoopCluster(i, tuple(g), "isolated" if len(g) == 1 else "clustered")
            for i, g in enumerate(groups)]


def assign_clusters(loops: Sequence[LoopClosure], clusters: Sequence[LoopCluster]) -> list[LoopClosure]:
    cid = {m: c.id for c in clusters for m in c.members}
    return [replace(l, cluster_id=cid.get(l.id)) for l in loops]


# --------------------------------------------------------------------------- #
# Recall
# --------------------------------------------------------------------------- #
def loop_discrepancy(loop: LoopClosure, poses: Mapping, mode: str = "relative") -> float:
    """Distance used by recall.

    ``relative``: gap between pose b's position and the position predicted
    from pose a through the loop transform.  ``positions``: plain distance
    between the two pose positions.
    """
    pa, pb = poses[loop.key_a], poses[loop.key_b]
    if mode == "positions":
        return float(np.linalg.norm(pa.translation - pb.translation))
    pred = pa @ loop.rel_transform
    return float(np.linalg.norm(pred.translation - pb.translation))


def recall_loops(rejected: Sequence[LoopClosure], current_poses: Mapping, dist_thresh: float = 2.0,
                 mode: str = "relative") -> list[LoopClosure]:
    """Return the rejected loops that the optimised poses now support, as ``recalled``."""
    out = []
    for l in rejected:
        if l.status != "rejected":
            continue
        if l.key_a not in current_poses or l.key_b not in current_poses:
            continue
        if loop_discrepancy(l, current_poses, mode) < dist_thresh:
            out.append(l.transition("recalled", reason="recalled"))
    return out
