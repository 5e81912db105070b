"""Pipeline configuration.

Every parameter has a default.  A TOML file may override any subset; an
unknown section or key is an error so that typos never pass silently.
"""
from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .loops import LoopParams
from .pgo import LPGOWeights
from .sim import DriftModel, SessionSpec
from .spatial import BAParams

STAGES = ("fpgo_only", "fpgo_ba", "full")
CLI_STAGES = {"fpgo": "fpgo_only", "ba": "fpgo_ba", "lpgo": "full", "all": "full"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    robot_count: int = 3
    scan_rate: float = 1.0
    speed: float = 1.25
    sigma: float = 0.01
    drift_rotation: float = 2e-3
    drift_translation: float = 5e-3
    drift_z: float = 2e-3
    false_loop_ratio: float = 0.2
    world_kind: str = "garage"
    world_extent: float = 30.0
    rays: int = 1500
    max_range: float = 25.0
    sensor_height: float = 1.2
    true_pair_radius: float = 2.0
    candidate_stride: int = 4

    def session_spec(self, seed: int) -> SessionSpec:
        return SessionSpec(robot_count=self.robot_count, scan_rate=self.scan_rate, speed=self.speed,
                           sigma=self.sigma,
                           drift=DriftModel(self.drift_rotation, self.drift_translation, self.drift_z),
                           false_loop_ratio=self.false_loop_ratio, rng_seed=seed,
                           world_kind=self.world_kind, world_extent=self.world_extent,
                           rays=self.rays, max_range=self.max_range,
                           sensor_height=self.sensor_height,
                           true_pair_radius=self.true_pair_radius,
                           candidate_stride=self.candidate_stride)


@dataclass(frozen=True)
class LoopConfig:
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
    max_correction_trans: float = 0.5
    max_correction_rot_deg: float = 5.0
    min_inlier_ratio: float = 0.75
    recall_dist: float = 2.0
    recall_mode: str = "relative"
    recall_max_passes: int = 10
    recall: bool = True
    cluster_radius: float = 5.0

    def params(self, seed: int) -> LoopParams:
        d = {f.name: getattr(self, f.name) for f in fields(LoopParams)
             if f.name not in ("max_correction_rot", "seed")}
        return LoopParams(**d, max_correction_rot=float(np.deg2rad(self.max_correction_rot_deg)),
                          seed=seed)


@dataclass(frozen=True)
class WindowConfig:
    radius: float = 15.0
    D: int = 3
    W: int = 10
    stride: int = 5
    prealign: bool = True
    voxel: float = 1.0
    planarity_thresh: float = 0.01
    min_points: int = 30
    max_depth: int = 3
    min_points_per_view: int = 3
    downsample: float = 0.1
    mu0: float = 1e-4
    max_iter: int = 50
    tol: float = 1e-7
    null_tol: float = 1e-3
    rounds: int = 2

    def ba_params(self) -> BAParams:
        return BAParams(self.voxel, self.planarity_thresh, self.min_points, self.max_depth,
                        self.min_points_per_view, self.downsample, self.mu0, self.max_iter,
                        self.tol, self.null_tol if self.null_tol > 0 else None, self.rounds)


@dataclass(frozen=True)
class GraphConfig:
    lambda_thresh: float = 50.0
    sim_thresh: float = 0.3
    literal_lambda_rule: bool = False
    overlap_voxel: float = 0.5
    corr_max_dist: float = 0.5
    w_low: float = 1.0
    w_mid: float = 10.0
    w_high: float = 100.0
    w_ba: float = 100.0
    w_loop: float = 1.0

    def weights(self) -> LPGOWeights:
        return LPGOWeights(self.w_low, self.w_mid, self.w_high, self.w_ba, self.w_loop)


@dataclass(frozen=True)
class MetricConfig:
    mme_radius: float = 0.5
    map_voxel: float = 0.05
    plane_min_points: int = 100


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    stage: str = "full"
    out: str = "out"
    threads: int = 1
    session_dir: str = ""
    # rigid offset (degrees, metres) applied to every non-anchor robot after
    # FPGO; used to provoke map divergence
    inject_offset: tuple = (0.0, 0.0)


@dataclass(frozen=True)
class PipelineConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    loops: LoopConfig = field(default_factory=LoopConfig)
    window: WindowConfig = field(default_factory=WindowConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def __post_init__(self):
        if self.run.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.run.stage!r}; expected one of {STAGES}")
        if self.window.D < 1 or self.window.W < 2 or self.window.stride < 1:
            raise ConfigError("window D >= 1, W >= 2 and stride >= 1 are required")
        if self.window.radius <= 0:
            raise ConfigError("window radius must be positive")
        if self.loops.recall_mode not in ("relative", "positions"):
            raise ConfigError("recall_mode must be 'relative' or 'positions'")

    def to_dict(self) -> dict:
        return asdict(self)

    def with_run(self, **changes) -> "PipelineConfig":
        return replace(self, run=replace(self.run, **changes))


_SECTIONS = {f.name: f.default_factory for f in fields(PipelineConfig)}


def _coerce(cls, section: str, values: dict):
    known = {f.name: f for f in fields(cls)}
    out = {}
    for k, v in values.items():
        if k not in known:
            raise ConfigError(f"unknown key {section}.{k}")
        default = known[k].default
        if isinstance(default, bool):
            if not isinstance(v, bool):
                raise ConfigError(f"{section}.{k} must be a boolean")
        elif isinstance(default, int):
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(f"{section}.{k} must be an integer")
        elif isinstance(default, float):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{section}.{k} must be a number")
            v = float(v)
        elif isinstance(default, str):
            if not isinstance(v, str):
                raise ConfigError(f"{section}.{k} must be a string")
        elif isinstance(default, tuple):
            v = tuple(float(x) for x in v)
        out[k] = v
    return cls(**out)


def config_from_dict(d: dict) -> PipelineConfig:
    parts = {}
    for name, value in d.items():
        if name not in _SECTIONS:
            raise ConfigError(f"unknown section {name!r}")
        if not isinstance(value, dict):
            raise ConfigError(f"section {name!r} must be a table")
        parts[name] = _coerce(type(_SECTIONS[name]()), name, value)
    return PipelineConfig(**parts)


def load_config(path) -> PipelineConfig:
    p = Path(path)
    try:
        data = tomllib.loads(p.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from None
    return config_from_dict(data)
