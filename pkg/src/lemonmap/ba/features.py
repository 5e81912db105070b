"""Adaptive voxel plane extraction."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from ..geom import PointCloud, Pose
from .cluster import PointCluster
from .problem import FeatureAssociation


def _planarity(pts: np.ndarray) -> float:
    c = np.cov(pts.T, bias=True)
    w = np.linalg.eigvalsh(c)
    return float(w[0] / w[2]) if w[2] > 0 else np.inf


def extract_planes(window_clouds: Sequence[PointCloud], poses: Sequence[Pose], voxel: float = 1.0,
                   planarity_thresh: float = 0.01, min_points: int = 30, max_depth: int = 3,
                   min_points_per_view: int = 1, min_views: int = 1) -> list[FeatureAssociation]:
    """Plane features from world-frame clouds, one cloud per pose.

    Voxels of size ``voxel`` are split octree-style up to ``max_depth`` times
    until their points are planar (``lambda_min / lambda_max <
    planarity_thresh``) with at least ``min_points`` points.  Each feature's
    points are mapped back to the sensor frame of the pose that observed
    them.
    """
    if len(window_clouds) != len(poses):
        raise ValueError("one pose per cloud is required")
    if voxel <= 0:
        raise ValueError("voxel must be positive")
    pts_all, owner = [], []
    for j, c in enumerate(window_clouds):
        if c.frame != "world":
            raise ValueError("extract_planes expects world-frame clouds")
        pts_all.append(c.points)
        owner.append(np.full(len(c), j))
    if not pts_all:
        return []
    pts = np.concatenate(pts_all)
    own = np.concatenate(owner)
    if len(pts) == 0:
        return []
    leaves: list[np.ndarray] = []

    def visit(idx: np.ndarray, size: float, depth: int):
        if len(idx) < min_points:
            return
        if _planarity(pts[idx]) < planarity_thresh:
            leaves.append(idx)
            return
        if depth >= max_depth:
            return
        origin = np.floor(pts[idx] / size) * size
        half = size / 2
        octant = ((pts[idx] - origin) >= half).astype(int) @ np.array([4, 2, 1])
        for o in range(8):
            visit(idx[octant == o], half, depth + 1)

    # root voxels in lexicographic key order, point indices ascending within each
    keys = np.floor(pts / voxel).astype(np.int64)
    keys -= keys.min(axis=0)
    span = keys.max(axis=0) + 1
    flat = (keys[:, 0] * span[1] + keys[:, 1]) * span[2] + keys[:, 2]
    _, inv, counts = np.unique(flat, return_inverse=True, return_counts=True)
    order = np.argsort(inv.reshape(-1), kind="stable")
    for idx in np.split(order, np.cumsum(counts)[:-1]):
        visit(idx, voxel, 0)

    # per-pose sensor-frame points, then one sort over (leaf, pose) pairs
    sens = np.empty_like(pts)
    for j, p in enumerate(poses):
        m = own == j
        sens[m] = p.inverse().transform_points(pts[m])
    if not leaves:
        return []
    pidx = np.concatenate(leaves)
    leaf = np.repeat(np.arange(len(leaves)), [len(l) for l in leaves])
    pair = leaf * len(poses) + own[pidx]
    order = np.argsort(pair, kind="stable")
    pidx, pair = pidx[order], pair[order]
    starts = np.flatnonzero(np.r_[True, pair[1:] != pair[:-1]])
    counts = np.diff(np.r_[starts, len(pair)])
    q = sens[pidx]
    V = np.add.reduceat(q, starts, axis=0)
    PP = np.add.reduceat((q[:, :, None] * q[:, None, :]).reshape(-1, 9), starts, axis=0)
    PP = PP.reshape(-1, 3, 3)
    PP = 0.5 * (PP + PP.transpose(0, 2, 1))
    leaf_of = pair[starts] // len(poses)
    pose_of = pair[starts] % len(poses)
    feats = []
    lo = 0
    bounds = np.flatnonzero(np.r_[leaf_of[1:] != leaf_of[:-1], True]) + 1
    for hi in bounds:
        views = {int(pose_of[g]): PointCluster._raw(PP[g], V[g], int(counts[g]))
                 for g in range(lo, hi) if counts[g] >= min_points_per_view}
        lo = hi
        if len(views) >= min_views:
            feats.append(FeatureAssociation(len(feats), views))
    return feats
