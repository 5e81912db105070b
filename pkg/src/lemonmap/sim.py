"""Deterministic synthetic multi-robot datasets with ground truth.

Worlds are sets of planar rectangles; scans are ray-cast against their
triangulation.  Loop candidates come from a ground-truth proximity oracle
with injected false positives, standing in for a place-recognition front
end.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geom import PointCloud, Pose, relative, se3_exp
from .loops import LoopClosure

WORLD_KINDS = ("corridor", "courtyard", "garage")
_GARAGE_WIDTHS = (5.0, 6.5, 4.5, 5.5)  # south, east, north, west


# --------------------------------------------------------------------------- #
# Planes
# --------------------------------------------------------------------------- #
@dataclass(frozen=True, eq=False)
class Plane:
    normal: np.ndarray
    offset: float
    polygon: np.ndarray  # (k, 3) convex, ordered

    def distance(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.normal - self.offset


@dataclass(frozen=True, eq=False)
class PlaneSet:
    planes: tuple[Plane, ...]

    def __len__(self) -> int:
        return len(self.planes)

    def __iter__(self):
        return iter(self.planes)

    def to_json(self) -> dict:
        return {"planes": [{"normal": p.normal.tolist(), "offset": p.offset,
                            "polygon": p.polygon.tolist()} for p in self.planes]}

    @classmethod
    def from_json(cls, d: dict) -> "PlaneSet":
        return cls(tuple(Plane(np.array(p["normal"], float), float(p["offset"]),
                               np.array(p["polygon"], float)) for p in d["planes"]))

    def triangles(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        v0, e1, e2, lab = [], [], [], []
        for i, pl in enumerate(self.planes):
            poly = pl.polygon
            for k in range(1, len(poly) - 1):
                v0.append(poly[0])
                e1.append(poly[k] - poly[0])
                e2.append(poly[k + 1] - poly[0])
                lab.append(i)
        return np.array(v0), np.array(e1), np.array(e2), np.array(lab, dtype=np.int64)


def _rect(center, u, v, hu, hv) -> Plane:
    """Rectangle spanned by unit in-plane axes ``u``, ``v`` with half sizes."""
    c, u, v = (np.asarray(a, float) for a in (center, u, v))
    n = np.cross(u, v)
    n /= np.linalg.norm(n)
    poly = np.array([c - hu * u - hv * v, c + hu * u - hv * v,
                     c + hu * u + hv * v, c - hu * u + hv * v])
    return Plane(n, float(n @ c), poly)


def _wall_x(x, y0, y1, h) -> Plane:
    """Wall in the plane x = const spanning y0..y1, z 0..h."""
    return _rect([x, 0.5 * (y0 + y1), 0.5 * h], [0, 1, 0], [0, 0, 1], 0.5 * abs(y1 - y0), 0.5 * h)


def _wall_y(y, x0, x1, h) -> Plane:
    return _rect([0.5 * (x0 + x1), y, 0.5 * h], [1, 0, 0], [0, 0, 1], 0.5 * abs(x1 - x0), 0.5 * h)


def _horizontal(z, x0, x1, y0, y1) -> Plane:
    return _rect([0.5 * (x0 + x1), 0.5 * (y0 + y1), z], [1, 0, 0], [0, 1, 0],
                 0.5 * (x1 - x0), 0.5 * (y1 - y0))


def _box(cx, cy, sx, sy, h) -> list[Plane]:
    return [_wall_x(cx - sx, cy - sy, cy + sy, h), _wall_x(cx + sx, cy - sy, cy + sy, h),
            _wall_y(cy - sy, cx - sx, cx + sx, h), _wall_y(cy + sy, cx - sx, cx + sx, h)]


def _pillars_along(rng, segments, count, height, clearance, size=(0.2, 0.45),
                   across=None) -> list[Plane]:
    """Boxes placed against corridor walls; ``segments`` are (p0, p1, inward normal)."""
    out: list[Plane] = []
    lengths = np.array([np.linalg.norm(np.subtract(b, a)) for a, b, _ in segments])
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    picks = np.sort(rng.uniform(0.0, cum[-1], size=count))
    for s in picks:
        k = int(np.searchsorted(cum, s, side="right") - 1)
        a, b, n = (np.asarray(x, float) for x in segments[k])
        frac = (s - cum[k]) / lengths[k]
        p = a + frac * (b - a)
        sx, sy = rng.uniform(*size, size=2)
        if across is not None:  # elongated along the wall
            if abs(n[0]) > 0.5:
                sx = rng.uniform(*across)
            else:
                sy = rng.uniform(*across)
        depth = sx if abs(n[0]) > 0.5 else sy
        c = p + n * (depth + clearance)
        out.extend(_box(c[0], c[1], sx, sy, height * rng.uniform(0.4, 1.0)))
    return out


def _beams(rng, x0, x1, y0, y1, along_x: bool, h: float, gap=(3.0, 6.0)) -> list[Plane]:
    """Ceiling beams crossing a corridor at random spacing.

    Walls, floor and ceiling leave travel along a corridor unobservable to
    plane BA; the beam faces pin it down.
    """
    out: list[Plane] = []
    lo, hi = (x0, x1) if along_x else (y0, y1)
    a, b = (y0, y1) if along_x else (x0, x1)
    s = lo + rng.uniform(*gap) / 2
    while s < hi - 1.0:
        depth = rng.uniform(0.2, 0.4)
        drop = rng.uniform(0.5, 0.8)
        zc = h - drop / 2
        for f in (s - depth / 2, s + depth / 2):
            c = [f, 0.5 * (a + b), zc] if along_x else [0.5 * (a + b), f, zc]
            u = [0, 1, 0] if along_x else [1, 0, 0]
            out.append(_rect(c, u, [0, 0, 1], 0.5 * (b - a), drop / 2))
        c = [s, 0.5 * (a + b), h - drop] if along_x else [0.5 * (a + b), s, h - drop]
        u, v = ([1, 0, 0], [0, 1, 0]) if along_x else ([0, 1, 0], [1, 0, 0])
        hu, hv = (depth / 2, 0.5 * (b - a)) if along_x else (depth / 2, 0.5 * (b - a))
        out.append(_rect(c, u, v, hu, hv))
        s += rng.uniform(*gap)
    return out


def generate_world(kind: str = "garage", extent: float = 30.0, seed: int = 0) -> PlaneSet:
    """Planar world with at least six planes; identical for identical seeds."""
    if extent <= 0:
        raise ValueError("extent must be positive")
    if kind not in WORLD_KINDS:
        raise ValueError(f"unknown world kind {kind!r}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))
    planes: list[Plane] = []
    if kind == "corridor":
        w, h = 4.0, 3.0
        planes += [_horizontal(0.0, 0, extent, -w / 2, w / 2), _horizontal(h, 0, extent, -w / 2, w / 2),
                   _wall_y(-w / 2, 0, extent, h), _wall_y(w / 2, 0, extent, h),
                   _wall_x(0.0, -w / 2, w / 2, h), _wall_x(extent, -w / 2, w / 2, h)]
        segs = [([1, -w / 2, 0], [extent - 1, -w / 2, 0], [0, 1, 0]),
                ([1, w / 2, 0], [extent - 1, w / 2, 0], [0, -1, 0])]
        planes += _pillars_along(rng, segs, max(2, int(extent / 5)), h, 0.0)
        planes += _beams(rng, 0, extent, -w / 2, w / 2, True, h)
    elif kind == "courtyard":
        h = 5.0
        L = extent
        b0, b1 = L / 3, 2 * L / 3
        planes += [_horizontal(0.0, 0, L, 0, L),
                   _wall_x(0, 0, L, h), _wall_x(L, 0, L, h), _wall_y(0, 0, L, h), _wall_y(L, 0, L, h),
                   *_box(L / 2, L / 2, (b1 - b0) / 2, (b1 - b0) / 2, h)]
        segs = [([2, 0, 0], [L - 2, 0, 0], [0, 1, 0]), ([2, L, 0], [L - 2, L, 0], [0, -1, 0]),
                ([0, 2, 0], [0, L - 2, 0], [1, 0, 0]), ([L, 2, 0], [L, L - 2, 0], [-1, 0, 0])]
        planes += _pillars_along(rng, segs, max(4, int(L / 4)), h, 0.0)
    else:  # garage: rectangular ring corridor, unequal widths break the point symmetry
        h = 3.0
        X, Y = extent, 0.6 * extent
        ws, we, wn, ww = _GARAGE_WIDTHS
        planes += [_horizontal(0.0, 0, X, 0, Y), _horizontal(h, 0, X, 0, Y),
                   _wall_x(0, 0, Y, h), _wall_x(X, 0, Y, h), _wall_y(0, 0, X, h), _wall_y(Y, 0, X, h),
                   *_box(0.5 * (ww + X - we), 0.5 * (ws + Y - wn), 0.5 * (X - we - ww),
                         0.5 * (Y - wn - ws), h)]
        segs = [([1, 0, 0], [X - 1, 0, 0], [0, 1, 0]), ([1, Y, 0], [X - 1, Y, 0], [0, -1, 0]),
                ([0, 1, 0], [0, Y - 1, 0], [1, 0, 0]), ([X, 1, 0], [X, Y - 1, 0], [-1, 0, 0])]
        planes += _pillars_along(rng, segs, max(4, int(2 * (X + Y) / 6)), h, 0.0)
        inner = [([ww + 1, ws, 0], [X - we - 1, ws, 0], [0, -1, 0]),
                 ([ww + 1, Y - wn, 0], [X - we - 1, Y - wn, 0], [0, 1, 0]),
                 ([ww, ws + 1, 0], [ww, Y - wn - 1, 0], [-1, 0, 0]),
                 ([X - we, ws + 1, 0], [X - we, Y - wn - 1, 0], [1, 0, 0])]
        planes += _pillars_along(rng, inner, max(4, int(2 * (X + Y) / 8)), 1.5, 0.1, (1.5, 2.3),
                                  (0.7, 0.9))
        planes += (_beams(rng, ww, X - we, 0, ws, True, h) + _beams(rng, ww, X - we, Y - wn, Y, True, h)
                   + _beams(rng, 0, ww, 0, Y, False, h) + _beams(rng, X - we, X, 0, Y, False, h))
    return PlaneSet(tuple(planes))


def world_centerline(kind: str, extent: float) -> np.ndarray:
    """Closed (or open, for the corridor) drivable polyline used for default robot paths."""
    if kind == "corridor":
        return np.array([[1.0, 0.0], [extent - 1.0, 0.0]])
    if kind == "courtyard":
        a, b = extent / 6, 5 * extent / 6
        return np.array([[a, a], [b, a], [b, b], [a, b], [a, a]])
    ws, we, wn, ww = _GARAGE_WIDTHS
    X, Y = extent, 0.6 * extent
    return np.array([[ww / 2, ws / 2], [X - we / 2, ws / 2], [X - we / 2, Y - wn / 2],
                     [ww / 2, Y - wn / 2], [ww / 2, ws / 2]])


# --------------------------------------------------------------------------- #
# Ray casting
# --------------------------------------------------------------------------- #
def cast_rays(world: PlaneSet, origin: np.ndarray, dirs: np.ndarray, max_range: float = np.inf,
              _tri=None) -> tuple[np.ndarray, np.ndarray]:
    """Nearest hit distance and plane label per ray (``inf``/-1 on miss)."""
    v0, e1, e2, lab = _tri if _tri is not None else world.triangles()
    eps = 1e-12
    pvec = np.cross(dirs[:, None, :], e2[None, :, :])
    det = np.einsum("tk,rtk->rt", e1, pvec)
    ok = np.abs(det) > eps
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = origin[None, :] - v0
    u = np.einsum("tk,rtk->rt", tvec, pvec) * inv
    qvec = np.cross(tvec, e1)
    v = np.einsum("rk,tk->rt", dirs, qvec) * inv
    t = np.einsum("tk,tk->t", e2, qvec)[None, :] * inv
    tol = 1e-12
    hit = ok & (u >= -tol) & (v >= -tol) & (u + v <= 1 + tol) & (t > 1e-9) & (t <= max_range)
    t = np.where(hit, t, np.inf)
    k = np.argmin(t, axis=1)
    dist = t[np.arange(len(dirs)), k]
    label = np.where(np.isfinite(dist), lab[k], -1)
    return dist, label


def _scan(world_tri, pose: Pose, rays: int, sigma: float, rng, max_range: float) -> PointCloud:
    d = rng.normal(size=(rays, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    dirs_w = d @ pose.rotation.T
    dist, label = cast_rays(None, pose.translation, dirs_w, max_range, _tri=world_tri)
    m = np.isfinite(dist)
    pts_w = pose.translation + dirs_w[m] * dist[m, None]
    if sigma > 0:
        pts_w = pts_w + rng.normal(scale=sigma, size=pts_w.shape)
    return PointCloud((pts_w - pose.translation) @ pose.rotation, "sensor", labels=label[m])


def simulate_scan(world: PlaneSet, pose: Pose, rays: int = 1500, sigma: float = 0.01,
                  seed: int = 0, max_range: float = 30.0) -> PointCloud:
    """Uniform-sphere scan from ``pose``; noisy hits returned in the sensor frame.

    Each hit is perturbed by isotropic Gaussian noise of std ``sigma``.  The
    returned cloud carries the source plane index of every point as labels.
    """
    if rays < 1:
        raise ValueError("rays must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    return _scan(world.triangles(), pose, rays, sigma, rng, max_range)


# --------------------------------------------------------------------------- #
# Trajectories and drift
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class DriftModel:
    rotation_rate: float = 0.0     # rad of noise std per metre travelled
    translation_rate: float = 0.0  # m of noise std per metre travelled
    z_bias: float = 0.0            # m of vertical bias per metre travelled


def inject_drift(gt_poses: Sequence[Pose], drift: DriftModel, seed: int = 0) -> list[Pose]:
    """Integrate perturbed relative motions; pose 0 is unchanged."""
    if len(gt_poses) < 2:
        raise ValueError("drift injection needs at least 2 poses")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 202]))
    out = [gt_poses[0]]
    cur = gt_poses[0].matrix()
    for prev, nxt in zip(gt_poses[:-1], gt_poses[1:]):
        rel = relative(prev, nxt).matrix()
        s = float(np.linalg.norm(rel[:3, 3]))
        xi = np.zeros(6)
        if drift.rotation_rate > 0:
            xi[:3] = rng.normal(scale=drift.rotation_rate * s, size=3)
        if drift.translation_rate > 0:
            xi[3:] = rng.normal(scale=drift.translation_rate * s, size=3)
        noisy = rel @ se3_exp(xi) if np.any(xi) else rel.copy()
        noisy[2, 3] += drift.z_bias * s
        cur = cur @ noisy
        out.append(Pose.from_matrix(cur, robot_id=nxt.robot_id, seq_index=nxt.seq_index,
                                    timestamp=nxt.timestamp))
    return out


def sample_path(waypoints: np.ndarray, spacing: float, robot_id: int = 0, scan_rate: float = 1.0,
                height: float = 1.0) -> list[Pose]:
    """Poses every ``spacing`` metres along a 2-D or 3-D polyline, heading along the path."""
    wp = np.asarray(waypoints, dtype=float)
    if wp.shape[1] == 2:
        wp = np.column_stack([wp, np.full(len(wp), height)])
    seg = np.diff(wp, axis=0)
    seglen = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seglen)])
    n = int(np.floor(cum[-1] / spacing + 1e-9)) + 1
    poses = []
    for i in range(n):
        s = min(i * spacing, cum[-1])
        k = min(int(np.searchsorted(cum, s, side="right") - 1), len(seg) - 1)
        p = wp[k] + (s - cum[k]) / seglen[k] * seg[k]
        yaw = np.arctan2(seg[k, 1], seg[k, 0])
        c, sn = np.cos(yaw), np.sin(yaw)
        R = np.array([[c, -sn, 0], [sn, c, 0], [0, 0, 1.0]])
        poses.append(Pose(R, p, robot_id, i, i / scan_rate))
    return poses


def _walk(loop: np.ndarray, start: float, length: float, reverse: bool = False) -> np.ndarray:
    """Waypoints for travelling ``length`` metres along a closed polyline from arc position ``start``."""
    seg = np.diff(loop, axis=0)
    seglen = np.linalg.norm(seg, axis=1)
    per = seglen.sum()
    cum = np.concatenate([[0.0], np.cumsum(seglen)])

    def at(s):
        s = s % per
        k = min(int(np.searchsorted(cum, s, side="right") - 1), len(seg) - 1)
        return loop[k] + (s - cum[k]) / seglen[k] * seg[k]

    sign = -1.0 if reverse else 1.0
    path = np.array([at(start + sign * s) for s in np.arange(0.0, length + 1e-9, 0.05)])
    keep = [0]
    for i in range(1, len(path) - 1):
        d1 = path[i] - path[keep[-1]]
        d2 = path[i + 1] - path[i]
        if abs(d1[0] * d2[1] - d1[1] * d2[0]) > 1e-6:
            keep.append(i)
    keep.append(len(path) - 1)
    return path[keep]


# --------------------------------------------------------------------------- #
# Sessions
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class SessionSpec:
    robot_count: int = 3
    waypoints: tuple = ()
    scan_rate: float = 1.0
    speed: float = 1.25
    sigma: float = 0.01
    drift: DriftModel = DriftModel(2e-3, 5e-3, 2e-3)
    false_loop_ratio: float = 0.2
    rng_seed: int = 0
    world_kind: str = "garage"
    world_extent: float = 30.0
    rays: int = 1500
    max_range: float = 25.0
    sensor_height: float = 1.2
    true_pair_radius: float = 2.0
    candidate_stride: int = 4

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if not 0.0 <= self.false_loop_ratio < 1.0:
            raise ValueError("false_loop_ratio must be in [0, 1)")

    def robot_waypoints(self) -> list[np.ndarray]:
        if self.waypoints:
            return [np.asarray(w, dtype=float) for w in self.waypoints]
        line = world_centerline(self.world_kind, self.world_extent)
        if self.world_kind == "corridor":
            L = line[-1, 0] - line[0, 0]
            out = []
            for k in range(self.robot_count):
                a = line[0, 0] + (k * 0.15 * L) % (0.4 * L)
                b = a + 0.6 * L
                out.append(np.array([[a, 0.3 * (k - 1)], [b, 0.3 * (k - 1)]]) if k % 2 == 0 else
                           np.array([[b, 0.3 * (k - 1)], [a, 0.3 * (k - 1)]]))
            return out
        per = float(np.linalg.norm(np.diff(line, axis=0), axis=1).sum())
        out = []
        for k in range(self.robot_count):
            start = k * per / max(self.robot_count, 1)
            length = (1.1 if k == 0 else 0.6) * per
            out.append(_walk(line, start, length, reverse=(k % 2 == 1)))
        return out


@dataclass(eq=False)
class RobotSession:
    robot_id: int
    gt: list[Pose]
    odom: list[Pose]
    scans: list[PointCloud]

    def __len__(self) -> int:
        return len(self.gt)


@dataclass(eq=False)
class SessionBundle:
    robots: list[RobotSession]
    world: PlaneSet
    loops: list[LoopClosure] = field(default_factory=list)
    spec: SessionSpec | None = None

    def robot(self, rid: int) -> RobotSession:
        for r in self.robots:
            if r.robot_id == rid:
                return r
        raise KeyError(rid)

    def gt_pose(self, key) -> Pose:
        return self.robot(key[0]).gt[key[1]]

    def scan(self, key) -> PointCloud:
        return self.robot(key[0]).scans[key[1]]

    def keys(self) -> list[tuple[int, int]]:
        return [(r.robot_id, i) for r in self.robots for i in range(len(r))]


def _child_seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


def generate_session(spec: SessionSpec, world: PlaneSet | None = None) -> SessionBundle:
    """Simulate every robot and the loop candidates for ``spec``."""
    if world is None:
        world = generate_world(spec.world_kind, spec.world_extent, spec.rng_seed)
    tri = world.triangles()
    spacing = spec.speed / spec.scan_rate
    robots = []
    for k, wp in enumerate(spec.robot_waypoints()):
        gt = sample_path(wp, spacing, robot_id=k, scan_rate=spec.scan_rate, height=spec.sensor_height)
        drifted = inject_drift(gt, spec.drift, _child_seed(spec.rng_seed, 1, k))
        base = drifted[0].inverse()
        odom = [(base @ p).with_meta(k, i, p.timestamp) for i, p in enumerate(drifted)]
        odom[0] = Pose.identity(k, 0, gt[0].timestamp)
        scans = [_scan(tri, p, spec.rays, spec.sigma,
                       np.random.default_rng(_child_seed(spec.rng_seed, 2, k, i)), spec.max_range)
                 for i, p in enumerate(gt)]
        robots.append(RobotSession(k, gt, odom, scans))
    bundle = SessionBundle(robots, world, [], spec)
    bundle.loops = generate_loop_candidates(bundle, spec.true_pair_radius, spec.false_loop_ratio,
                                            spec.rng_seed, stride=spec.candidate_stride)
    return bundle


def _random_small_transform(rng, max_angle: float, max_trans: float) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    ang = rng.uniform(0.0, max_angle)
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    return se3_exp(np.concatenate([axis * ang, d * rng.uniform(0.0, max_trans)]))


def generate_loop_candidates(bundle: SessionBundle, true_pair_radius: float = 2.0,
                             false_loop_ratio: float = 0.2, seed: int = 0, stride: int = 4,
                             min_self_gap: int = 20, false_min_distance: float = 10.0,
                             rot_noise: float = np.deg2rad(2.0), trans_noise: float = 0.2
                             ) -> list[LoopClosure]:
    """Ground-truth proximity candidates plus labelled false positives."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 303]))
    pos = {r.robot_id: np.array([p.translation for p in r.gt]) for r in bundle.robots}
    pairs = []
    rids = sorted(pos)
    for ra in rids:
        for rb in rids:
            if rb < ra:
                continue
            for ia in range(0, len(pos[ra]), stride):
                d = np.linalg.norm(pos[rb] - pos[ra][ia], axis=1)
                if ra == rb:
                    d[max(0, ia - min_self_gap):ia + min_self_gap + 1] = np.inf
                    d[:ia] = np.inf  # each self pair once
                ib = int(np.argmin(d))
                if d[ib] <= true_pair_radius:
                    pairs.append((ra, ia, rb, ib))
    if not pairs:
        raise ValueError("no overlap in sessions")
    cands = []
    for ra, ia, rb, ib in pairs:
        rel = relative(bundle.gt_pose((ra, ia)), bundle.gt_pose((rb, ib))).matrix()
        noisy = rel @ _random_small_transform(rng, rot_noise, trans_noise)
        cands.append((ra, ia, rb, ib, Pose.from_matrix(noisy), True))
    n_false = int(round(false_loop_ratio / (1.0 - false_loop_ratio) * len(pairs)))
    keys = [(r, i) for r in rids for i in range(len(pos[r]))]
    allpos = np.array([pos[r][i] for r, i in keys])
    guard = 0
    while n_false > 0 and guard < 100000:
        guard += 1
        a, b = rng.choice(len(keys), size=2, replace=False)
        ka, kb = keys[a], keys[b]
        if np.linalg.norm(allpos[a] - allpos[b]) < false_min_distance:
            continue
        if ka[0] == kb[0] and abs(ka[1] - kb[1]) <= min_self_gap:
            continue
        yaw = rng.uniform(-np.pi, np.pi)
        xi = np.array([*rng.normal(scale=np.deg2rad(1.0), size=2), yaw,
                       *rng.uniform(-2.0, 2.0, size=2), 0.0])
        if ka > kb:
            ka, kb = kb, ka
        cands.append((ka[0], ka[1], kb[0], kb[1], Pose.exp(xi), False))
        n_false -= 1
    cands.sort(key=lambda c: (c[0], c[1], c[2], c[3], not c[5]))
    return [LoopClosure(id=i, robot_a=ra, idx_a=ia, robot_b=rb, idx_b=ib, rel_transform=T,
                        gt_valid=valid)
            for i, (ra, ia, rb, ib, T, valid) in enumerate(cands)]


# --------------------------------------------------------------------------- #
# Small BA scenes
# --------------------------------------------------------------------------- #
def room_planes(size=(8.0, 6.0, 3.0)) -> PlaneSet:
    """Closed box room with six planes (floor, ceiling, four walls)."""
    X, Y, Z = size
    return PlaneSet((_horizontal(0.0, 0, X, 0, Y), _horizontal(Z, 0, X, 0, Y),
                     _wall_x(0.0, 0, Y, Z), _wall_x(X, 0, Y, Z),
                     _wall_y(0.0, 0, X, Z), _wall_y(Y, 0, X, Z)))


def sample_plane_points(plane: Plane, n: int, rng) -> np.ndarray:
    """Uniform samples on a rectangular plane polygon."""
    p0, p1, _, p3 = plane.polygon[:4]
    a, b = rng.uniform(size=(2, n))
    return p0 + a[:, None] * (p1 - p0) + b[:, None] * (p3 - p0)


def room_ba_scene(n_poses: int = 10, points_per_view: int = 40, sigma: float = 0.0,
                  seed: int = 0, size=(8.0, 6.0, 3.0), planes: PlaneSet | None = None):
    """Ground-truth poses and per-plane, per-pose sensor-frame point sets.

    Returns ``(gt_poses, observations)`` where ``observations[f][j]`` is an
    ``(n, 3)`` array of plane ``f`` points seen from pose ``j``.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 404]))
    planes = room_planes(size) if planes is None else planes
    X, Y, Z = size
    gt = []
    for j in range(n_poses):
        t = rng.uniform([1.0, 1.0, 0.8], [X - 1.0, Y - 1.0, Z - 0.8])
        xi = np.concatenate([rng.normal(scale=0.1, size=2), [rng.uniform(-np.pi, np.pi)], [0, 0, 0]])
        R = se3_exp(xi)[:3, :3]
        gt.append(Pose(R, t, 0, j, float(j)))
    obs = []
    for pl in planes:
        per = []
        for p in gt:
            pw = sample_plane_points(pl, points_per_view, rng)
            if sigma > 0:
                pw = pw + rng.normal(scale=sigma, size=pw.shape)
            per.append(p.inverse().transform_points(pw))
        obs.append(per)
    return gt, obs


def ba_benchmark_scene(n_poses: int = 200, seed: int = 0, rays: int = 1500, sigma: float = 0.01):
    """Dense window for timing window BA: poses scattered over one courtyard side.

    Returns ``(gt_poses, scans, center)``, poses keyed ``(0, i)``; every pose
    lies within 15 m of ``center``.
    """
    world = generate_world("courtyard", 30.0, 0)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 808]))
    center = np.array([5.0, 15.0, 1.2])
    gt = {}
    for i in range(n_poses):
        t = np.array([rng.uniform(2.0, 9.0), rng.uniform(3.0, 27.0), 1.2])
        R = se3_exp(np.array([0.0, 0.0, rng.uniform(-np.pi, np.pi), 0.0, 0.0, 0.0]))[:3, :3]
        gt[(0, i)] = Pose(R, t, 0, i, float(i))
    scans = {k: simulate_scan(world, p, rays=rays, sigma=sigma, seed=_child_seed(seed, k[1]))
             for k, p in gt.items()}
    return gt, scans, center
