"""SE(3) algebra, point clouds, spatial indexing and trajectory alignment.

Conventions used across the package:

* a pose maps sensor-frame points into the parent (world) frame,
  ``p_world = R @ p_sensor + t``;
* tangent vectors are 6-vectors ordered rotation first, ``xi = [omega, rho]``;
* perturbations are right-multiplicative, ``T <- T @ Exp(xi)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

_ORTHO_TOL = 1e-12
_ORTHO_REJECT = 1e-6
_SMALL_ANGLE = 1e-6


# --------------------------------------------------------------------------- #
# SO(3) / SE(3) primitives
# --------------------------------------------------------------------------- #
def hat(w: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector (batched over leading axes)."""
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def so3_exp(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)[..., None, None]
    K = hat(w)
    K2 = K @ K
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    return np.eye(3) + a * K + b * K2


def so3_log(R: np.ndarray) -> np.ndarray:
    return Rotation.from_matrix(R).as_rotvec()


def so3_left_jacobian(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    K = hat(w)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    return (
        np.eye(3)
        + (1.0 - np.cos(theta)) / theta**2 * K
        + (theta - np.sin(theta)) / theta**3 * (K @ K)
    )


def so3_left_jacobian_inv(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    K = hat(w)
    if theta < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * K + K @ K / 12.0
    half = 0.5 * theta
    coef = (1.0 - half * np.cos(half) / np.sin(half)) / theta**2
    return np.eye(3) - 0.5 * K + coef * (K @ K)


def se3_hat(xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    out = np.zeros(xi.shape[:-1] + (4, 4))
    out[..., :3, :3] = hat(xi[..., :3])
    out[..., :3, 3] = xi[..., 3:]
    return out


def se3_exp(xi: np.ndarray) -> np.ndarray:
    """4x4 homogeneous matrix of ``Exp([omega, rho])``."""
    xi = np.asarray(xi, dtype=float)
    w, rho = xi[:3], xi[3:]
    T = np.eye(4)
    T[:3, :3] = so3_exp(w)
    T[:3, 3] = so3_left_jacobian(w) @ rho
    return T


def se3_log(T: np.ndarray) -> np.ndarray:
    w = so3_log(T[:3, :3])
    rho = so3_left_jacobian_inv(w) @ T[:3, 3]
    return np.concatenate([w, rho])


def se3_log_batch(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Vectorised log over stacks ``R (n,3,3)``, ``t (n,3)``."""
    w = Rotation.from_matrix(R).as_rotvec()
    theta = np.linalg.norm(w, axis=1)[:, None, None]
    K = hat(w)
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    half = 0.5 * safe
    coef = np.where(small, 1.0 / 12.0, (1.0 - half * np.cos(half) / np.sin(half)) / safe**2)
    Vinv = np.eye(3) - 0.5 * K + coef * (K @ K)
    rho = np.einsum("nij,nj->ni", Vinv, t)
    return np.concatenate([w, rho], axis=1)


def se3_adjoint(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Adjoint for the ``[omega, rho]`` ordering (batched)."""
    R = np.asarray(R, dtype=float)
    t = np.asarray(t, dtype=float)
    out = np.zeros(R.shape[:-2] + (6, 6))
    out[..., :3, :3] = R
    out[..., 3:, 3:] = R
    out[..., 3:, :3] = hat(t) @ R
    return out


def _barfoot_q(w: np.ndarray, rho: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    W, P = hat(w), hat(rho)
    WP, PW = W @ P, P @ W
    WPW = W @ P @ W
    if theta < 1e-4:
        c1, c2, c3 = 1.0 / 6.0, 1.0 / 24.0, 1.0 / 120.0
    else:
        s, c = np.sin(theta), np.cos(theta)
        c1 = (theta - s) / theta**3
        c2 = (theta**2 + 2.0 * c - 2.0) / (2.0 * theta**4)
        c3 = (2.0 * theta - 3.0 * s + theta * c) / (2.0 * theta**5)
    return (
        0.5 * P
        + c1 * (WP + PW + WPW)
        + c2 * (W @ WP + PW @ W - 3.0 * WPW)
        + c3 * (WPW @ W + W @ WPW)
    )


def se3_left_jacobian(xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    w, rho = xi[:3], xi[3:]
    J = so3_left_jacobian(w)
    out = np.zeros((6, 6))
    out[:3, :3] = J
    out[3:, 3:] = J
    out[3:, :3] = _barfoot_q(w, rho)
    return out


def se3_right_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    w, rho = -xi[:3], -xi[3:]
    Jinv = so3_left_jacobian_inv(w)
    Q = _barfoot_q(w, rho)
    out = np.zeros((6, 6))
    out[:3, :3] = Jinv
    out[3:, 3:] = Jinv
    out[3:, :3] = -Jinv @ Q @ Jinv
    return out


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Nearest rotation in the Frobenius sense (polar decomposition)."""
    U, _, Vt = np.linalg.svd(R)
    Q = U @ Vt
    if np.linalg.det(Q) < 0:
        U[:, -1] *= -1
        Q = U @ Vt
    return Q


def orthogonality_defect(R: np.ndarray) -> float:
    return float(np.abs(R.T @ R - np.eye(3)).max())


# --------------------------------------------------------------------------- #
# Pose
# --------------------------------------------------------------------------- #
@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform plus its place in a multi-robot pose set."""

    rotation: np.ndarray
    translation: np.ndarray
    robot_id: int = 0
    seq_index: int = 0
    timestamp: float = 0.0

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("pose has non-finite entries")
        defect = orthogonality_defect(R)
        if defect > _ORTHO_REJECT or np.linalg.det(R) <= 0:
            raise ValueError(f"rotation is not orthonormal (defect {defect:.3g})")
        if defect > _ORTHO_TOL:
            R = orthonormalize(R)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls, robot_id: int = 0, seq_index: int = 0, timestamp: float = 0.0) -> "Pose":
        return cls(np.eye(3), np.zeros(3), robot_id, seq_index, timestamp)

    @classmethod
    def from_matrix(cls, T: np.ndarray, **meta) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3], **meta)

    @classmethod
    def exp(cls, xi: np.ndarray, **meta) -> "Pose":
        return cls.from_matrix(se3_exp(xi), **meta)

    @classmethod
    def from_quat(cls, t, q_xyzw, **meta) -> "Pose":
        return cls(Rotation.from_quat(q_xyzw).as_matrix(), t, **meta)

    @property
    def key(self) -> tuple[int, int]:
        return (self.robot_id, self.seq_index)

    @property
    def position(self) -> np.ndarray:
        return self.translation

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def quat(self) -> np.ndarray:
        """Quaternion ``(qx, qy, qz, qw)`` with ``qw >= 0``."""
        q = Rotation.from_matrix(self.rotation).as_quat()
        if q[3] < 0:
            q = -q
        return q

    def log(self) -> np.ndarray:
        return se3_log(self.matrix())

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return self._with(Rt, -Rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        return compose(self, other)

    __matmul__ = compose

    def retract(self, xi: np.ndarray) -> "Pose":
        """``self @ Exp(xi)``."""
        E = se3_exp(xi)
        return self._with(self.rotation @ E[:3, :3], self.rotation @ E[:3, 3] + self.translation)

    def transform_points(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float).reshape(-1, 3)
        return pts @ self.rotation.T + self.translation

    def with_meta(self, robot_id: int, seq_index: int, timestamp: float | None = None) -> "Pose":
        ts = self.timestamp if timestamp is None else timestamp
        return Pose(self.rotation, self.translation, robot_id, seq_index, ts)

    def canonical(self) -> "Pose":
        """The pose a TUM reader reconstructs from this pose's written line.

        Not idempotent: write the original pose, carry the canonical one
        forward, and a resumed run sees exactly the in-memory values.
        """
        return Pose.from_quat(self.translation, self.quat(), robot_id=self.robot_id,
                              seq_index=self.seq_index, timestamp=self.timestamp)

    def _with(self, R, t) -> "Pose":
        return Pose(R, t, self.robot_id, self.seq_index, self.timestamp)

    def __repr__(self) -> str:
        xyz = ", ".join(f"{v:.4f}" for v in self.translation)
        return f"Pose(robot={self.robot_id}, seq={self.seq_index}, t=[{xyz}])"


def compose(a: Pose, b: Pose) -> Pose:
    """``a @ b``; the result carries ``b``'s metadata."""
    R = a.rotation @ b.rotation
    t = a.rotation @ b.translation + a.translation
    return Pose(R, t, b.robot_id, b.seq_index, b.timestamp)


def relative(a: Pose, b: Pose) -> Pose:
    """Pose of ``b`` expressed in the frame of ``a`` (``a^-1 @ b``)."""
    return compose(a.inverse(), b)


def rotation_angle(R: np.ndarray) -> float:
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def pose_error(a: Pose, b: Pose) -> tuple[float, float]:
    """Translation (m) and rotation (rad) difference between two poses."""
    d = relative(a, b)
    return float(np.linalg.norm(d.translation)), rotation_angle(d.rotation)


def stack_poses(poses: Sequence[Pose]) -> tuple[np.ndarray, np.ndarray]:
    R = np.stack([p.rotation for p in poses]) if poses else np.zeros((0, 3, 3))
    t = np.stack([p.translation for p in poses]) if poses else np.zeros((0, 3))
    return R, t


# --------------------------------------------------------------------------- #
# Point clouds
# --------------------------------------------------------------------------- #
FRAMES = ("sensor", "world")


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    frame: str = "sensor"
    per_point_cov: np.ndarray | None = None
    labels: np.ndarray | None = field(default=None)

    def __post_init__(self):
        pts = np.array(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud has non-finite coordinates")
        if self.frame not in FRAMES:
            raise ValueError(f"unknown frame {self.frame!r}")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        if self.per_point_cov is not None:
            cov = np.array(self.per_point_cov, dtype=float).reshape(-1, 3, 3)
            if len(cov) != len(pts):
                raise ValueError("per_point_cov length differs from points")
            if not np.allclose(cov, np.swapaxes(cov, 1, 2), atol=1e-9):
                raise ValueError("per_point_cov must be symmetric")
            if len(cov) and np.linalg.eigvalsh(cov).min() < -1e-9:
                raise ValueError("per_point_cov must be PSD")
            object.__setattr__(self, "per_point_cov", cov)
        if self.labels is not None:
            lab = np.array(self.labels, dtype=np.int64).reshape(-1)
            if len(lab) != len(pts):
                raise ValueError("labels length differs from points")
            object.__setattr__(self, "labels", lab)

    def __len__(self) -> int:
        return len(self.points)

    def transformed(self, pose: Pose, frame: str = "world") -> "PointCloud":
        cov = None
        if self.per_point_cov is not None:
            R = pose.rotation
            cov = R @ self.per_point_cov @ R.T
        return PointCloud(pose.transform_points(self.points), frame, cov, self.labels)

    def subset(self, mask_or_idx) -> "PointCloud":
        cov = None if self.per_point_cov is None else self.per_point_cov[mask_or_idx]
        lab = None if self.labels is None else self.labels[mask_or_idx]
        return PointCloud(self.points[mask_or_idx], self.frame, cov, lab)


def voxel_downsample(points: np.ndarray, voxel: float) -> np.ndarray:
    """Indices of one representative point per voxel (first occurrence)."""
    if len(points) == 0:
        return np.zeros(0, dtype=np.int64)
    keys = np.floor(points / voxel).astype(np.int64)
    _, idx = np.unique(keys, axis=0, return_index=True)
    return np.sort(idx)


# --------------------------------------------------------------------------- #
# Spatial index
# --------------------------------------------------------------------------- #
class SpatialIndex:
    """Build-once k-d tree over 3-vectors carrying integer payload ids."""

    def __init__(self, positions: np.ndarray, ids: Iterable[int] | None = None):
        pos = np.asarray(positions, dtype=float).reshape(-1, 3)
        self._ids = np.arange(len(pos)) if ids is None else np.asarray(list(ids), dtype=np.int64)
        if len(self._ids) != len(pos):
            raise ValueError("ids and positions differ in length")
        self._pos = pos
        self._tree = cKDTree(pos) if len(pos) else None

    def __len__(self) -> int:
        return len(self._pos)

    @property
    def positions(self) -> np.ndarray:
        return self._pos

    @property
    def ids(self) -> np.ndarray:
        return self._ids

    def radius_search(self, center, r: float) -> list[int]:
        if r <= 0:
            raise ValueError("radius must be positive")
        if self._tree is None:
            return []
        hits = self._tree.query_ball_point(np.asarray(center, dtype=float), r)
        return sorted(int(self._ids[i]) for i in hits)


def radius_search(index: SpatialIndex, center, r: float) -> list[int]:
    return index.radius_search(center, r)


# --------------------------------------------------------------------------- #
# PCA and alignment
# --------------------------------------------------------------------------- #
def pca_principal_axis(points) -> tuple[np.ndarray, np.ndarray]:
    """Principal axis and descending eigenvalues of the sample covariance.

    The axis sign is fixed so that ``axis . (1, 1, 1) >= 0``; an exact tie
    is broken toward ``+x`` (then ``+y``).
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) < 2:
        raise ValueError("degenerate point set")
    centered = pts - pts.mean(axis=0)
    if np.abs(centered).max() <= 1e-12 * max(1.0, np.abs(pts).max()):
        raise ValueError("degenerate point set")
    cov = centered.T @ centered / len(pts)
    vals, vecs = np.linalg.eigh(cov)
    vals = np.clip(vals[::-1], 0.0, None)
    axis = vecs[:, -1].copy()
    axis[np.abs(axis) < 1e-15] = 0.0
    s = axis.sum()
    if abs(s) <= 1e-12:
        nz = np.flatnonzero(np.abs(axis) > 1e-12)
        if nz.size and axis[nz[0]] < 0:
            axis = -axis
    elif s < 0:
        axis = -axis
    return axis, vals


def umeyama_align(est: Sequence[Pose], gt: Sequence[Pose]) -> Pose:
    """Rigid transform ``S`` minimising ``sum ||g_i - S e_i||^2`` over positions."""
    if len(est) != len(gt):
        raise ValueError("trajectory lengths differ")
    if len(est) < 3:
        raise ValueError("alignment needs at least 3 poses")
    E = np.array([p.translation for p in est])
    G = np.array([p.translation for p in gt])
    return umeyama_points(E, G)


def umeyama_points(E: np.ndarray, G: np.ndarray) -> Pose:
    mu_e, mu_g = E.mean(axis=0), G.mean(axis=0)
    Ec, Gc = E - mu_e, G - mu_g
    sv = np.linalg.svd(Ec, compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-12):
        raise ValueError("alignment ill-conditioned")
    cov = Gc.T @ Ec / len(E)
    U, _, Vt = np.linalg.svd(cov)
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    t = mu_g - R @ mu_e
    return Pose(R, t)


def kabsch(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rigid ``(R, t)`` with ``dst ~ R src + t`` (no conditioning check)."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(3)
    if np.linalg.det(Vt.T @ U.T) < 0:
        D[2, 2] = -1.0
    R = Vt.T @ D @ U.T
    return R, mu_d - R @ mu_s
