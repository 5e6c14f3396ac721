"""Tunable parameters of the perception pipeline.

None of these numbers come with the method itself; they are plausible
highway values and every one can be overridden with a dotted key, e.g.
``graph.assoc_max_distance=0.8``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any


@dataclass
class IngestConfig:
    smc_spacing: float = 2.0          # m between SMC samples
    smc_along_sigma: float = 1.0      # m, position along the marking is not observed
    hrc_max_range: float = 130.0      # m
    driver_sigma: float = 0.25        # m, lateral spread of drivers around the lane middle
    object_confidence: float = 0.5
    default_lane_width: float = 3.5   # m
    width_gate_min: float = 2.5       # m
    width_gate_max: float = 4.5       # m
    width_tracking: bool = True       # filter SMC widths over time instead of using each frame alone
    width_drift_sigma: float = 0.05   # m of lane width change per 100 m travelled
    width_sigma_floor: float = 0.05   # m, lower bound on the tracked width sigma


@dataclass
class GraphConfig:
    window: int = 50                  # tau, number of past ego poses kept
    prune_behind: float = 5.0         # m behind the ego vehicle
    assoc_max_distance: float = 1.0   # m, Euclidean cap
    assoc_max_heading: float = 20.0   # deg
    assoc_chi2: float = 7.814727903251178  # chi-square 95 %, 3 dof
    odo_sigma_xy_rel: float = 0.02
    odo_sigma_xy_abs: float = 0.01    # m
    odo_sigma_theta_rel: float = 0.01
    odo_sigma_theta_abs: float = 0.002  # rad
    width_sigma_smc: float = 0.15     # m
    width_sigma_default: float = 0.3  # m
    width_sigma_theta: float = 0.02   # rad
    smoothing_sigma_y: float = 0.1    # m
    smoothing_sigma_theta: float = 0.02  # rad
    switch_prior: float = 1.0
    confidence_update: bool = True
    object_association: str = "all"   # "all" feature vertices or only "objects"-fed ones


@dataclass
class SolverConfig:
    max_iterations: int = 20
    tolerance: float = 1e-6
    max_halvings: int = 5
    pose_only_iterations: int = 0     # leading iterations with switch variables held


@dataclass
class LaneModelConfig:
    base_min_features: int = 3
    base_min_span: float = 20.0       # m
    base_outlier_threshold: float = 2.5
    base_max_iterations: int = 10
    group_gate_fraction: float = 0.25  # of the lane width
    cluster_radius: float = 0.5       # m
    near_range: float = 40.0          # m
    min_support: int = 3
    min_lane_separation: float = 2.0  # m at x = 0
    horizon: float = 120.0            # m
    feature_min_x: float = -5.0       # m
    q_y0: float = 0.05
    q_theta0: float = 0.005
    q_c0: float = 1e-5
    q_c1: float = 1e-7
    nominal_dt: float = 0.1           # s, process noise is given per nominal frame
    init_sigma: tuple = (1.0, 0.05, 1e-3, 1e-5)
    expiry_frames: int = 10
    min_measurement_sigma: tuple = (0.02, 0.001, 1e-6, 1e-8)


@dataclass
class PipelineConfig:
    ingest: IngestConfig = field(default_factory=IngestConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    # Each frame starts from the previous optimum, so one iteration per frame
    # suffices; switch variables keep converging across frames.
    solver: SolverConfig = field(default_factory=lambda: SolverConfig(max_iterations=1))
    lanes: LaneModelConfig = field(default_factory=LaneModelConfig)
    fused_covariance: str = "diagonal"   # "marginal" or "diagonal"


class ConfigError(ValueError):
    pass


def _coerce(value: str, current: Any):
    if isinstance(current, bool):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {value!r}")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, tuple):
        parts = [p for p in value.strip("()[] ").split(",") if p.strip()]
        if len(parts) != len(current):
            raise ConfigError(f"expected {len(current)} comma-separated values, got {value!r}")
        return tuple(float(p) for p in parts)
    return value


def apply_override(cfg, key: str, value: str) -> None:
    """Set a dotted attribute path on a (nested) dataclass config from a string."""
    parts = key.split(".")
    target = cfg
    for p in parts[:-1]:
        if not dataclasses.is_dataclass(target) or not hasattr(target, p):
            raise ConfigError(f"unknown configuration key {key!r}")
        target = getattr(target, p)
    name = parts[-1]
    if not dataclasses.is_dataclass(target) or name not in {f.name for f in dataclasses.fields(target)}:
        raise ConfigError(f"unknown configuration key {key!r}")
    current = getattr(target, name)
    if dataclasses.is_dataclass(current):
        raise ConfigError(f"{key!r} names a section, not a value")
    try:
        setattr(target, name, _coerce(value, current))
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {exc}") from exc


def flatten(cfg, prefix: str = "") -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(v):
            out.update(flatten(v, key + "."))
        else:
            out[key] = list(v) if isinstance(v, tuple) else v
    return out
