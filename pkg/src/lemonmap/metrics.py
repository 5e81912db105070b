"""Trajectory and map-quality metrics."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geom import PointCloud, Pose, umeyama_points


def _matched(est, gt):
    if isinstance(est, Mapping):
        if set(est) != set(gt):
            raise ValueError("estimate and ground truth cover different poses")
        keys = sorted(est)
        return [est[k] for k in keys], [gt[k] for k in keys]
    if len(est) != len(gt):
        raise ValueError("trajectory lengths differ")
    return list(est), list(gt)


def ate_rmse(est, gt) -> float:
    """Translational RMSE after one rigid alignment over all poses.

    ``est``/``gt`` are matched sequences or dicts keyed by ``(robot, seq)``.
    """
    e, g = _matched(est, gt)
    if not e:
        raise ValueError("empty trajectory")
    E = np.array([p.translation for p in e])
    G = np.array([p.translation for p in g])
    if len(E) >= 3:
        A = umeyama_points(E, G)
        E = A.transform_points(E)
    else:
        E = E - E.mean(axis=0) + G.mean(axis=0)
    return float(np.sqrt(np.mean(np.sum((E - G) ** 2, axis=1))))


def z_stats(poses: Sequence[Pose]) -> tuple[float, float]:
    """Mean absolute and RMS height change relative to the first pose."""
    z = np.array([p.translation[2] for p in poses], dtype=float)
    if len(z) == 0:
        raise ValueError("no poses")
    dz = z - z[0]
    return float(np.mean(np.abs(dz))), float(np.sqrt(np.mean(dz**2)))


def _local_moments(pts: np.ndarray, radius: float):
    """Per-point neighbour count, sum and outer-product sum (self included)."""
    tree = cKDTree(pts)
    pairs = tree.query_pairs(radius, output_type="ndarray")
    i = np.concatenate([pairs[:, 0], pairs[:, 1], np.arange(len(pts))])
    j = np.concatenate([pairs[:, 1], pairs[:, 0], np.arange(len(pts))])
    n = np.bincount(i, minlength=len(pts)).astype(float)
    q = pts[j]
    s = np.stack([np.bincount(i, q[:, a], len(pts)) for a in range(3)], axis=1)
    ss = np.empty((len(pts), 3, 3))
    for a in range(3):
        for b in range(a, 3):
            ss[:, a, b] = ss[:, b, a] = np.bincount(i, q[:, a] * q[:, b], len(pts))
    return n, s, ss


def mme(cloud, radius: float = 0.5, min_neighbors: int = 10, reg: float = 1e-9) -> float:
    """Mean map entropy: average of ``0.5 ln det(2 pi e Sigma)`` over local neighbourhoods."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
    if len(pts) < 100:
        raise ValueError("cloud needs at least 100 points")
    # centre for numerical conditioning; entropy is translation invariant
    pts = pts - pts.mean(axis=0)
    n, s, ss = _local_moments(pts, radius)
    ok = n >= min_neighbors
    if not ok.any():
        raise ValueError("radius too small")
    n, s, ss = n[ok], s[ok], ss[ok]
    mean = s / n[:, None]
    cov = ss / n[:, None, None] - mean[:, :, None] * mean[:, None, :]
    cov += reg * np.eye(3)
    _, logdet = np.linalg.slogdet(2 * np.pi * np.e * cov)
    return float(np.mean(0.5 * logdet))


def _plane_stats(pts: np.ndarray) -> tuple[float, float]:
    w = np.linalg.eigvalsh(np.cov(pts.T, bias=True))[::-1]
    w = np.clip(w, 0.0, None)
    thickness = 2.0 * np.sqrt(w[2])
    planarity = (w[1] - w[2]) / w[0] if w[0] > 0 else 0.0
    return float(thickness), float(planarity)


def associate_planes(pts: np.ndarray, planes, max_dist: float = 0.3) -> np.ndarray:
    """Index of the nearest reference plane per point (-1 beyond ``max_dist``).

    Points must also project inside the plane polygon's bounding box grown
    by ``max_dist``.
    """
    best = np.full(len(pts), np.inf)
    lab = np.full(len(pts), -1, dtype=np.int64)
    for k, pl in enumerate(planes):
        d = np.abs(pl.distance(pts))
        lo = pl.polygon.min(axis=0) - max_dist
        hi = pl.polygon.max(axis=0) + max_dist
        inside = np.all((pts >= lo) & (pts <= hi), axis=1)
        m = inside & (d < max_dist) & (d < best)
        best[m] = d[m]
        lab[m] = k
    return lab


def plane_geometry(cloud: PointCloud, planes=None, min_points: int = 100,
                   use_labels: bool = True, max_dist: float = 0.3) -> tuple[float, float]:
    """Average plane thickness (``2 sqrt(lambda3)``) and planarity over associated planes.

    Points are grouped by their simulator labels when present, otherwise by
    nearest reference plane.
    """
    pts = cloud.points
    if use_labels and cloud.labels is not None:
        lab = cloud.labels
    elif planes is not None:
        lab = associate_planes(pts, planes, max_dist)
    else:
        raise ValueError("need labels or reference planes")
    th, pl = [], []
    for k in np.unique(lab[lab >= 0]):
        sel = pts[lab == k]
        if len(sel) >= min_points:
            t, p = _plane_stats(sel)
            th.append(t)
            pl.append(p)
    if not th:
        raise ValueError("no associable planes")
    return float(np.mean(th)), float(np.mean(pl))


def merged_cloud(poses: Mapping, scans: Mapping, keys=None, voxel: float = 0.0) -> PointCloud:
    """World-frame union of the scans of ``keys`` (all poses by default)."""
    keys = sorted(poses) if keys is None else list(keys)
    pts, labs = [], []
    for k in keys:
        s = scans[k]
        pts.append(poses[k].transform_points(s.points))
        if s.labels is not None:
            labs.append(s.labels)
    P = np.concatenate(pts) if pts else np.zeros((0, 3))
    L = np.concatenate(labs) if len(labs) == len(pts) and labs else None
    if voxel > 0 and len(P):
        from .geom import voxel_downsample
        idx = voxel_downsample(P, voxel)
        P = P[idx]
        L = None if L is None else L[idx]
    return PointCloud(P, "world", labels=L)


@dataclass
class MetricReport:
    ate_rmse: float
    z_drift: float
    z_rmse: float
    mme: float | None = None
    plane_thickness: float | None = None
    planarity: float | None = None
    per_robot: dict = field(default_factory=dict)
    label: str = ""

    def __post_init__(self):
        for name in ("ate_rmse", "z_rmse"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.plane_thickness is not None and self.plane_thickness < 0:
            raise ValueError("plane_thickness must be non-negative")
        if self.planarity is not None and not 0.0 <= self.planarity <= 1.0:
            raise ValueError("planarity must lie in [0, 1]")

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def evaluate(est: Mapping, gt: Mapping, scans: Mapping | None = None, planes=None,
             mme_radius: float = 0.5, map_voxel: float = 0.05, label: str = "") -> MetricReport:
    """Full report for a multi-robot estimate keyed by ``(robot, seq)``."""
    robots = sorted({k[0] for k in est})
    per = {}
    zd, zr = [], []
    for r in robots:
        ks = sorted(k for k in est if k[0] == r)
        d, q = z_stats([est[k] for k in ks])
        zd.append(d)
        zr.append(q)
        per[str(r)] = {"ate_rmse": ate_rmse({k: est[k] for k in ks}, {k: gt[k] for k in ks}),
                       "z_drift": d, "z_rmse": q}
    rep = MetricReport(ate_rmse(est, gt), float(np.mean(zd)), float(np.mean(zr)), per_robot=per,
                       label=label)
    if scans is not None:
        cloud = merged_cloud(est, scans, voxel=map_voxel)
        rep.mme = mme(cloud, mme_radius)
        rep.plane_thickness, rep.planarity = plane_geometry(cloud, planes)
    return rep


_COLUMNS = [("ate_rmse", "ATE[m]"), ("z_drift", "z-drift[m]"), ("z_rmse", "z-RMSE[m]"),
            ("mme", "MME"), ("plane_thickness", "thick[m]"), ("planarity", "planarity")]


def format_table(reports: Sequence[MetricReport]) -> str:
    """Aligned plain-text table, one row per report."""
    head = ["method"] + [c for _, c in _COLUMNS]
    rows = [[r.label or "-"] + ["-" if getattr(r, f) is None else f"{getattr(r, f):.4f}"
                                for f, _ in _COLUMNS] for r in reports]
    widths = [max(len(x) for x in col) for col in zip(head, *rows)]
    fmt = lambda row: "  ".join(x.ljust(w) if i == 0 else x.rjust(w)  # noqa: E731
                                for i, (x, w) in enumerate(zip(row, widths)))
    return "\n".join([fmt(head), fmt(["-" * w for w in widths])] + [fmt(r) for r in rows])
