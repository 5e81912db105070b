"""Point clusters: additive second-moment summaries of point sets."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geom import Pose


@dataclass(frozen=True, eq=False)
class PointCluster:
    """``P = sum p p^T``, ``v = sum p``, ``N = count``."""

    P: np.ndarray
    v: np.ndarray
    N: int

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float).reshape(3, 3)
        v = np.asarray(self.v, dtype=float).reshape(3)
        if self.N < 0:
            raise ValueError("cluster count must be non-negative")
        if np.abs(P - P.T).max() > 1e-12 * max(1.0, np.abs(P).max()):
            raise ValueError("cluster P must be symmetric")
        object.__setattr__(self, "P", 0.5 * (P + P.T))
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "N", int(self.N))

    @classmethod
    def _raw(cls, P: np.ndarray, v: np.ndarray, N: int) -> "PointCluster":
        # internal fast path: P symmetric and shapes right by construction
        c = object.__new__(cls)
        object.__setattr__(c, "P", P)
        object.__setattr__(c, "v", v)
        object.__setattr__(c, "N", N)
        return c

    @classmethod
    def empty(cls) -> "PointCluster":
        return cls(np.zeros((3, 3)), np.zeros(3), 0)

    @classmethod
    def from_matrix(cls, C: np.ndarray) -> "PointCluster":
        C = np.asarray(C, dtype=float)
        return cls(C[:3, :3], C[:3, 3], int(round(C[3, 3])))

    def matrix(self) -> np.ndarray:
        C = np.zeros((4, 4))
        C[:3, :3] = self.P
        C[:3, 3] = self.v
        C[3, :3] = self.v
        C[3, 3] = self.N
        return C

    def __add__(self, other: "PointCluster") -> "PointCluster":
        return PointCluster._raw(self.P + other.P, self.v + other.v, self.N + other.N)

    def transformed(self, pose: Pose) -> "PointCluster":
        """Cluster of the transformed points, ``T C T^T``."""
        R, t = pose.rotation, pose.translation
        Rv = R @ self.v
        Rvt = Rv[:, None] * t
        P = R @ self.P @ R.T + Rvt + Rvt.T + self.N * (t[:, None] * t)
        return PointCluster._raw(0.5 * (P + P.T), Rv + self.N * t, self.N)

    @property
    def mean(self) -> np.ndarray:
        if self.N == 0:
            raise ValueError("empty cluster has no mean")
        return self.v / self.N

    def covariance(self) -> np.ndarray:
        """``P/N - v v^T / N^2``."""
        if self.N == 0:
            raise ValueError("empty cluster has no covariance")
        return scatter_matrix(self.P, self.v, self.N)


def scatter_matrix(P, v, N) -> np.ndarray:
    return P / N - np.outer(v, v) / N**2


def cluster_coordinate(points) -> PointCluster:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    return PointCluster(pts.T @ pts, pts.sum(axis=0), len(pts))
