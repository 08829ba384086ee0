"""Flat typed key = value configuration with every tunable default."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path

from .estimator import SolverConfig
from .frontend import FeatureConfig
from .imu import ImuNoise
from .keyframes import KeyframeConfig
from .matching import MatchConfig


class DataError(ValueError):
    """Malformed input file; carries a path:line diagnostic."""


@dataclass
class Config:
    # sliding window and pipeline
    window_size: int = 10
    outer_rounds: int = 2
    threads: int = 1
    primary_lidar: int = 1
    gravity: float = 9.81
    init_window: float = 0.05
    deskew_mode: str = "piecewise"
    bootstrap_update: bool = False
    # feature extraction
    half_window: int = 5
    edge_threshold: float = 0.5
    plane_threshold: float = 0.05
    sectors: int = 6
    edge_cap: int = 2
    plane_cap: int = 12
    reject_unreliable: bool = True
    gap_factor: float = 1.5
    jump_ratio: float = 0.1
    parallel_factor: float = 10.0
    # matching
    knn: int = 5
    max_radius: float = 2.0
    min_fitness: float = 0.1
    edge_dominance: float = 3.0
    plane_max_deviation: float = 0.05
    plane_min_spread: float = 0.05
    plane_leaf: float = 0.4
    edge_leaf: float = 0.2
    reuse_translation: float = 0.005
    reuse_rotation: float = 0.001
    # solver
    max_iterations: int = 8
    function_tolerance: float = 1e-6
    gradient_tolerance: float = 1e-10
    parameter_tolerance: float = 1e-8
    huber_delta: float = 1.0
    lidar_sigma: float = 0.01
    # keyframes
    keyframe_knn: int = 10
    keyframe_distance: float = 1.0
    keyframe_angle: float = math.pi / 18
    keyframe_cap: int = 0
    # IMU noise densities
    gyro_noise: float = 1e-3
    accel_noise: float = 1e-2
    gyro_bias_rw: float = 1e-5
    accel_bias_rw: float = 1e-5
    # evaluation and export
    association_window: float = 0.01
    degeneracy_condition: float = 1e4
    map_leaf: float = 0.0

    def feature(self) -> FeatureConfig:
        return FeatureConfig(self.half_window, self.edge_threshold, self.plane_threshold, self.sectors,
                             self.edge_cap, self.plane_cap, self.reject_unreliable, self.gap_factor,
                             self.jump_ratio, self.parallel_factor)

    def match(self) -> MatchConfig:
        return MatchConfig(knn=self.knn, max_radius=self.max_radius, min_fitness=self.min_fitness,
                           edge_dominance=self.edge_dominance, plane_max_deviation=self.plane_max_deviation,
                           plane_min_spread=self.plane_min_spread, plane_leaf=self.plane_leaf,
                           edge_leaf=self.edge_leaf)

    def solver(self) -> SolverConfig:
        return SolverConfig(self.max_iterations, self.function_tolerance, self.gradient_tolerance,
                            self.parameter_tolerance, huber_delta=self.huber_delta,
                            lidar_sigma=self.lidar_sigma)

    def keyframe(self) -> KeyframeConfig:
        return KeyframeConfig(self.keyframe_knn, self.keyframe_distance, self.keyframe_angle,
                              self.keyframe_cap or None)

    def imu_noise(self) -> ImuNoise:
        return ImuNoise(self.gyro_noise, self.accel_noise, self.gyro_bias_rw, self.accel_bias_rw)

    def updated(self, **changes) -> "Config":
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        for key, value in changes.items():
            if key not in data:
                raise KeyError(f"unknown config key {key!r}")
            data[key] = value
        return Config(**data)

    @classmethod
    def from_file(cls, path) -> "Config":
        return cls.from_mapping(parse_key_values(path), str(path))

    @classmethod
    def from_mapping(cls, values: dict, origin: str = "<config>") -> "Config":
        types = {f.name: type(f.default) for f in fields(cls)}
        parsed = {}
        for key, (raw, line) in values.items():
            if key not in types:
                raise DataError(f"{origin}:{line}: unknown config key {key!r}")
            try:
                parsed[key] = _coerce(raw, types[key])
            except ValueError as exc:
                raise DataError(f"{origin}:{line}: {key}: {exc}") from None
        return cls(**parsed)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)!r}\n".replace("'", "") for f in fields(self))


def _coerce(raw: str, kind: type):
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return raw


def parse_key_values(path) -> dict[str, tuple[str, int]]:
    """``key = value`` lines; ``#`` starts a comment.  Returns key -> (value, line)."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise DataError(f"{path}:{lineno}: empty key")
        out[key] = (value, lineno)
    return out
