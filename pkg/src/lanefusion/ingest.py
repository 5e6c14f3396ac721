"""Turn raw sensor reports into lists of :class:`LaneFeature`."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .config import IngestConfig
from .geometry import (
    Clothoid,
    LaneFeature,
    Pose2,
    information_batch,
    pose_compose,
    rotate_covariance,
)

SMC_MAX_RANGE = 90.0
HRC_MAX_RANGE = 130.0


@dataclass(frozen=True)
class SmcLaneReport:
    """Ego-lane clothoids from the serial camera; a side may be missing."""

    left: Optional[Clothoid]
    right: Optional[Clothoid]
    detection_range: float
    sigmas: tuple = (0.05, 0.002, 2e-5, 2e-7)   # y0, theta0, c0, c1
    confidence: float = 0.8

    def __post_init__(self):
        if not 0.0 <= self.detection_range <= SMC_MAX_RANGE:
            raise ValueError(f"SMC detection range must lie in [0, 90] m, got {self.detection_range}")
        if len(self.sigmas) != 4 or any(s < 0 for s in self.sigmas):
            raise ValueError("SMC sigmas must be four non-negative numbers")


@dataclass(frozen=True)
class HrcFeatureReport:
    features: tuple
    max_range: float = HRC_MAX_RANGE

    def __post_init__(self):
        if self.max_range > HRC_MAX_RANGE:
            raise ValueError(f"HRC range is at most 130 m, got {self.max_range}")
        object.__setattr__(self, "features", tuple(self.features))


@dataclass(frozen=True, eq=False)
class TrackedObject:
    id: int
    pose: Pose2
    velocity: float
    covariance: np.ndarray = field(repr=False)
    confirmed: bool = True

    def __post_init__(self):
        object.__setattr__(self, "covariance", np.array(self.covariance, dtype=float).reshape(3, 3))


class HrcIngest(NamedTuple):
    features: list
    dropped: int          # malformed covariances
    clipped: int          # beyond max_range


class LaneWidth(NamedTuple):
    width: float
    from_smc: bool
    sigma: Optional[float] = None     # explicit sigma, else the graph's per-source default


def _sample_side(c: Clothoid, xs: np.ndarray, sig: np.ndarray, along: float, conf: float) -> list:
    ys = c.y(xs)
    slope = c.heading(xs)
    ths = np.arctan(slope)
    jy = np.stack([np.ones_like(xs), xs, xs * xs / 2.0, xs**3 / 6.0], axis=1)
    jt = np.stack([np.zeros_like(xs), np.ones_like(xs), xs, xs * xs / 2.0], axis=1)
    jt /= (1.0 + slope * slope)[:, None]
    p = sig**2
    cov = np.zeros((len(xs), 3, 3))
    cov[:, 1, 1] = (jy * jy) @ p
    cov[:, 1, 2] = cov[:, 2, 1] = (jy * jt) @ p
    cov[:, 2, 2] = (jt * jt) @ p
    t = np.stack([np.cos(ths), np.sin(ths), np.zeros_like(xs)], axis=1)
    cov += along**2 * t[:, :, None] * t[:, None, :]
    return [LaneFeature.trusted(Pose2(float(x), float(y), float(th)), conf, cv)
            for x, y, th, cv in zip(xs, ys, ths, cov)]


def sample_smc_features(r: SmcLaneReport, cfg: IngestConfig | None = None) -> tuple[list, list]:
    """Sample both SMC clothoids every ``cfg.smc_spacing`` metres.

    Returns ``(left, right)`` feature lists; a missing side yields an empty
    list. Lateral and heading covariance is propagated to first order from
    the clothoid parameter sigmas; the along-marking position gets a fixed
    variance because a sample point on a continuous line has no preferred
    longitudinal location.
    """
    cfg = cfg or IngestConfig()
    sig = np.asarray(r.sigmas, dtype=float)
    sides = []
    for c in (r.left, r.right):
        if c is None or r.detection_range <= 0.0:
            sides.append([])
            continue
        hi = min(r.detection_range, c.x_max)
        n = int(math.floor(hi / cfg.smc_spacing + 1e-9))
        xs = cfg.smc_spacing * np.arange(n + 1)
        xs = xs[(xs >= c.x_min) & (xs <= hi)]
        sides.append(_sample_side(c, xs, sig, cfg.smc_along_sigma, r.confidence) if len(xs) else [])
    return sides[0], sides[1]


def ingest_hrc_features(r: HrcFeatureReport) -> HrcIngest:
    """Keep HRC features within range whose covariance can be inverted."""
    inside = [f for f in r.features if f.pose.x <= r.max_range]
    clipped = len(r.features) - len(inside)
    if not inside:
        return HrcIngest([], 0, clipped)
    _, ok = information_batch(np.array([f.covariance for f in inside]))
    kept = [f for f, k in zip(inside, ok) if k]
    return HrcIngest(kept, len(inside) - len(kept), clipped)


def lane_width_estimate(smc: Optional[SmcLaneReport], cfg: IngestConfig | None = None) -> LaneWidth:
    cfg = cfg or IngestConfig()
    if smc is not None and smc.left is not None and smc.right is not None and smc.detection_range > 0:
        w = smc.left.y0 - smc.right.y0
        if cfg.width_gate_min <= w <= cfg.width_gate_max:
            return LaneWidth(w, True)
    return LaneWidth(cfg.default_lane_width, False)


class LaneWidthTracker:
    """Scalar Kalman filter over the SMC lane widths.

    Each plausible SMC width is a measurement with sigma ``smc_sigma``; the
    variance grows with the distance travelled.  Before the first SMC width
    the default width is reported with ``default_sigma``.
    """

    def __init__(self, cfg: IngestConfig | None = None, smc_sigma: float = 0.15, default_sigma: float = 0.3):
        self.cfg = cfg or IngestConfig()
        self.smc_sigma = smc_sigma
        self.default_sigma = default_sigma
        self.width: Optional[float] = None
        self.var = 0.0

    def update(self, smc: Optional[SmcLaneReport], travelled: float = 0.0) -> LaneWidth:
        c = self.cfg
        if self.width is not None:
            self.var += c.width_drift_sigma**2 * abs(travelled) / 100.0
        z = lane_width_estimate(smc, c)
        if z.from_smc:
            r = self.smc_sigma**2
            if self.width is None:
                self.width, self.var = z.width, r
            else:
                k = self.var / (self.var + r)
                self.width += k * (z.width - self.width)
                self.var *= 1.0 - k
        if self.width is None:
            return LaneWidth(c.default_lane_width, False, self.default_sigma)
        return LaneWidth(self.width, True, max(math.sqrt(self.var), c.width_sigma_floor))


def current_lane_width(smc: Optional[SmcLaneReport], cfg: IngestConfig | None = None) -> float:
    """Lane width from the SMC clothoid offsets, else the 3.5 m default."""
    return lane_width_estimate(smc, cfg).width


def eligible_objects(objects: Sequence[TrackedObject]) -> list:
    """Confirmed objects driving ahead of the ego vehicle."""
    return [o for o in objects if o.confirmed and o.pose.x > 0.0]


def object_to_features(o: TrackedObject, lane_width: float, cfg: IngestConfig | None = None):
    """Left/right pseudo-marking features at ±w/2 perpendicular to the object heading.

    Returns ``None`` for objects that are not ahead of the ego vehicle.
    """
    cfg = cfg or IngestConfig()
    if not cfg.width_gate_min <= lane_width <= cfg.width_gate_max:
        raise ValueError(f"lane width {lane_width} outside [{cfg.width_gate_min}, {cfg.width_gate_max}]")
    if o.pose.x <= 0.0:
        return None
    half = lane_width / 2.0
    driver = rotate_covariance(np.diag([0.0, cfg.driver_sigma**2, 0.0]), o.pose.theta)
    cov = o.covariance + driver
    left = LaneFeature(pose_compose(o.pose, Pose2(0.0, half, 0.0)), cfg.object_confidence, cov)
    right = LaneFeature(pose_compose(o.pose, Pose2(0.0, -half, 0.0)), cfg.object_confidence, cov)
    return left, right
