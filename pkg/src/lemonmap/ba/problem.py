"""Containers for plane bundle adjustment problems."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from ..geom import Pose
from .cluster import PointCluster


@dataclass(frozen=True, eq=False)
class FeatureAssociation:
    """One plane feature: per-pose sensor-frame clusters keyed by pose index."""

    feature_id: int
    views: Mapping[int, PointCluster]

    @property
    def total_points(self) -> int:
        return sum(c.N for c in self.views.values())


@dataclass(frozen=True, eq=False)
class BAProblem:
    poses: tuple[Pose, ...]
    features: tuple[FeatureAssociation, ...]
    frozen_mask: np.ndarray = None
    gauge: bool = True

    def __post_init__(self):
        object.__setattr__(self, "poses", tuple(self.poses))
        object.__setattr__(self, "features", tuple(self.features))
        m = np.zeros(len(self.poses), dtype=bool) if self.frozen_mask is None else \
            np.asarray(self.frozen_mask, dtype=bool).copy()
        if m.shape != (len(self.poses),):
            raise ValueError("frozen_mask must have one entry per pose")
        m.setflags(write=False)
        object.__setattr__(self, "frozen_mask", m)
        for f in self.features:
            for j in f.views:
                if not 0 <= j < len(self.poses):
                    raise ValueError(f"feature {f.feature_id} references missing pose {j}")
        if not self.gauge and not m.any():
            raise ValueError("BA problem needs a frozen pose or a gauge-fixed pose")

    @property
    def n_poses(self) -> int:
        return len(self.poses)

    def gauge_index(self) -> int | None:
        if not self.gauge:
            return None
        free = np.flatnonzero(~self.frozen_mask)
        return int(free[0]) if len(free) else None

    def fixed_mask(self) -> np.ndarray:
        """Frozen poses plus the gauge pose."""
        m = self.frozen_mask.copy()
        g = self.gauge_index()
        if g is not None:
            m[g] = True
        return m

    def with_poses(self, poses: Sequence[Pose]) -> "BAProblem":
        return replace(self, poses=tuple(poses))


@dataclass(frozen=True, eq=False)
class BADerivatives:
    J: np.ndarray
    H: np.ndarray
    cost: float = float("nan")
