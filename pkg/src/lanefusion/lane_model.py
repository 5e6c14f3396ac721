"""Multi-lane clothoid model on top of the fused features.

A single base clothoid carries the road course (heading, curvature,
curvature rate); each lane boundary runs parallel to that course at its
own lateral offset, measured along the course normal. Offsets come from
grouping the fused features, and every boundary is tracked over time with
a small Kalman filter.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .config import LaneModelConfig
from .geometry import MAX_CLOTHOID_HEADING, Clothoid, LaneFeature, Pose2


MAX_SLOPE_ANGLE = 1.4   # rad, gross heading outliers are clipped before taking the slope


class NoFitError(ValueError):
    """Too few (or too clustered, or too contaminated) features for a fit."""


@dataclass(frozen=True, eq=False)
class BaseClothoid:
    theta0: float
    c0: float
    c1: float
    inliers: np.ndarray
    outliers: np.ndarray
    covariance: np.ndarray = field(repr=False)   # 3x3 over (theta0, c0, c1)
    sigma: float = 0.0                           # robust residual scale, rad

    @property
    def params(self) -> np.ndarray:
        return np.array([self.theta0, self.c0, self.c1])

    def shape(self, x):
        """Lateral course without offset: theta0 x + c0 x²/2 + c1 x³/6."""
        x = np.asarray(x, dtype=float)
        return x * (self.theta0 + x * (self.c0 / 2.0 + x * self.c1 / 6.0))

    def heading(self, x):
        x = np.asarray(x, dtype=float)
        return self.theta0 + x * (self.c0 + x * self.c1 / 2.0)

    def moved(self, motion: Pose2) -> "BaseClothoid":
        """The same course seen after the ego vehicle moved by ``motion``."""
        dx = motion.x
        th = self.theta0 + self.c0 * dx + self.c1 * dx * dx / 2.0 - motion.theta
        f = np.array([[1.0, dx, dx * dx / 2.0], [0.0, 1.0, dx], [0.0, 0.0, 1.0]])
        return BaseClothoid(th, self.c0 + self.c1 * dx, self.c1, self.inliers, self.outliers,
                            f @ self.covariance @ f.T, self.sigma)


def _design(x: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones_like(x), x, x * x / 2.0])


def _wls(X: np.ndarray, y: np.ndarray, w: np.ndarray):
    sw = np.sqrt(w)
    beta, *_ = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)
    return beta


def _trimmed_variance_factor(c: float) -> float:
    """Variance of a unit normal truncated to [-c, c]; rescales trimmed residual variances."""
    phi = math.exp(-0.5 * c * c) / math.sqrt(2.0 * math.pi)
    mass = math.erf(c / math.sqrt(2.0))
    return max(1.0 - 2.0 * c * phi / mass, 1e-3)


def _median_start(x: np.ndarray, th: np.ndarray, bins: int = 8):
    """Quadratic through per-bin medians of the slopes; robust starting point.

    Bins hold equal numbers of features along x. Returns ``None`` when there
    are too few features for three bins.
    """
    n = len(x)
    k = min(bins, n // 4)
    if k < 3:
        return None
    order = np.argsort(x, kind="stable")
    parts = np.array_split(order, k)
    bx = np.array([np.median(x[p]) for p in parts])
    by = np.array([np.median(th[p]) for p in parts])
    if np.ptp(bx) <= 0.0:
        return None
    return _wls(_design(bx), by, np.array([len(p) for p in parts], dtype=float))


def fit_base_clothoid(features: Sequence[LaneFeature], cfg: LaneModelConfig | None = None,
                      sigma_floor: float = 1e-3) -> BaseClothoid:
    """Robust weighted fit of feature heading slopes against [1, x, x²/2].

    A feature heading angle maps to the slope tan(theta) of the cubic at the
    feature, which is what the course derivative describes.

    The first round starts from a curve through per-bin median slopes, so
    gross outliers do not drag the initial fit. Each round standardises every
    residual by a MAD scale estimate (floored at ``sigma_floor``), keeps the
    features within ``cfg.base_outlier_threshold`` and refits them; features
    may re-enter. Stops when the inlier set is stable or after
    ``cfg.base_max_iterations`` rounds.
    """
    cfg = cfg or LaneModelConfig()
    n = len(features)
    if n < cfg.base_min_features:
        raise NoFitError(f"need at least {cfg.base_min_features} features, got {n}")
    x = np.array([f.pose.x for f in features])
    th = np.tan(np.clip([f.pose.theta for f in features], -MAX_SLOPE_ANGLE, MAX_SLOPE_ANGLE))
    w = np.array([max(f.confidence, 1e-6) for f in features])
    if x.max() - x.min() < cfg.base_min_span:
        raise NoFitError(f"features span only {x.max() - x.min():.1f} m in x")
    X = _design(x)
    inl = np.ones(n, dtype=bool)
    scale = sigma_floor
    beta = _median_start(x, th)
    for it in range(cfg.base_max_iterations):
        if beta is None or it > 0:
            beta = _wls(X[inl], th[inl], w[inl])
        r = th - X @ beta
        ri = r if it == 0 else r[inl]
        scale = max(1.4826 * float(np.median(np.abs(ri - np.median(ri)))), sigma_floor)
        new = np.abs(r) <= cfg.base_outlier_threshold * scale
        if new.sum() < 0.5 * n:
            raise NoFitError(f"outlier rejection would discard {n - new.sum()} of {n} features")
        if new.sum() < cfg.base_min_features or np.ptp(x[new]) < cfg.base_min_span:
            raise NoFitError("inliers do not support a fit")
        if np.array_equal(new, inl):
            break
        inl = new
    beta = _wls(X[inl], th[inl], w[inl])
    r = th[inl] - X[inl] @ beta
    wi = w[inl]
    dof = max(int(inl.sum()) - 3, 1)
    s2 = float(np.sum(wi * r * r) / np.sum(wi)) * inl.sum() / dof
    s2 /= _trimmed_variance_factor(cfg.base_outlier_threshold)
    s2 = max(s2, sigma_floor**2 * 1e-4)
    xtwx = X[inl].T @ (X[inl] * wi[:, None]) / np.mean(wi)
    cov = s2 * np.linalg.inv(xtwx)
    return BaseClothoid(float(beta[0]), float(beta[1]), float(beta[2]),
                        np.nonzero(inl)[0], np.nonzero(~inl)[0], cov, scale)


class FeatureGroup(NamedTuple):
    lane_id: Optional[int]      # tracked lane that seeded the group, None for a new seed
    seed_offset: float
    members: np.ndarray         # indices into the feature list


class Grouping(NamedTuple):
    groups: list
    ungrouped: np.ndarray


@dataclass
class TrackedLane:
    id: int
    state: np.ndarray               # y0, theta0, c0, c1
    covariance: np.ndarray
    age: int = 0
    support: int = 0
    unsupported: int = 0

    @property
    def y0(self) -> float:
        return float(self.state[0])

    def clothoid(self, horizon: float = 120.0) -> Clothoid:
        y0, th, c0, c1 = (float(v) for v in self.state)
        p = parallel_course(np.array([th, c0, c1]), y0, horizon)
        th = float(np.clip(p[1], -MAX_CLOTHOID_HEADING, MAX_CLOTHOID_HEADING))
        return Clothoid(float(p[0]), th, float(p[2]), float(p[3]), 0.0, horizon)


def _course(params: np.ndarray, u: np.ndarray):
    th, c0, c1 = params
    y = u * (th + u * (c0 / 2.0 + u * c1 / 6.0))
    dy = th + u * (c0 + u * c1 / 2.0)
    return y, dy, c0 + u * c1


def parallel_course(params: np.ndarray, offset: float, horizon: float = 120.0, samples: int = 61) -> np.ndarray:
    """Cubic (y0, theta0, c0, c1) of the curve at normal distance ``offset`` from a course.

    ``params`` = (theta0, c0, c1) of a course through the origin.  The
    parallel curve of a cubic is not a cubic; it is sampled and fitted by
    least squares over [0, horizon].  For zero offset the course itself is
    returned.
    """
    params = np.asarray(params, dtype=float)
    if offset == 0.0:
        return np.r_[0.0, params]
    u = np.linspace(-0.1 * horizon, 1.1 * horizon, samples)
    y, dy, _ = _course(params, u)
    norm = np.hypot(1.0, dy)
    xs = u - offset * dy / norm
    ys = y + offset / norm
    m = (xs >= 0.0) & (xs <= horizon)
    s = xs[m] / horizon
    coef = np.polynomial.polynomial.polyfit(s, ys[m], 3)
    return np.array([coef[0], coef[1] / horizon, 2.0 * coef[2] / horizon**2, 6.0 * coef[3] / horizon**3])


def normal_offsets(x: np.ndarray, y: np.ndarray, params: np.ndarray, iterations: int = 3) -> np.ndarray:
    """Signed distance of points from a course through the origin, positive to the left."""
    u = np.array(x, dtype=float)
    for _ in range(iterations):
        yc, dy, ddy = _course(params, u)
        g = (u - x) + (yc - y) * dy
        h = 1.0 + dy * dy + (yc - y) * ddy
        u = u - g / h
    yc, dy, _ = _course(params, u)
    return ((y - yc) - (x - u) * dy) / np.hypot(1.0, dy)


def _offsets(features: Sequence[LaneFeature], base: BaseClothoid):
    x = np.array([f.pose.x for f in features])
    y = np.array([f.pose.y for f in features])
    return x, normal_offsets(x, y, base.params)


def _cluster_1d(values: np.ndarray, radius: float) -> list:
    """Single-linkage clusters of sorted values (gap <= radius); returns index arrays."""
    if len(values) == 0:
        return []
    order = np.argsort(values, kind="stable")
    v = values[order]
    breaks = np.nonzero(np.diff(v) > radius)[0] + 1
    return [order[a:b] for a, b in zip(np.r_[0, breaks], np.r_[breaks, len(v)])]


def _assign(off: np.ndarray, seeds: np.ndarray, gate: float) -> np.ndarray:
    """Index of the closest seed within the gate, -1 otherwise (seeds pre-sorted for ties)."""
    if len(seeds) == 0 or len(off) == 0:
        return np.full(len(off), -1, dtype=np.int64)
    d = np.abs(off[:, None] - seeds[None, :])
    k = np.argmin(d, axis=1)
    return np.where(d[np.arange(len(off)), k] < gate, k, -1)


def group_features(features: Sequence[LaneFeature], base: BaseClothoid,
                   previous: Sequence[TrackedLane], lane_width: float = 3.5,
                   cfg: LaneModelConfig | None = None) -> Grouping:
    """Partition features into per-boundary groups.

    Features first go to the closest previous boundary (its offset combined
    with the current base course) within ``w/4``. The rest, if in the near
    range, are projected onto the y-axis along the base course and clustered;
    well-supported clusters seed new groups that then collect the remaining
    features at any distance.
    """
    cfg = cfg or LaneModelConfig()
    gate = cfg.group_gate_fraction * lane_width
    if not features:
        return Grouping([], np.empty(0, dtype=np.int64))
    x, off = _offsets(features, base)
    usable = x >= cfg.feature_min_x
    # ties go to the boundary with the smaller |y0| (then the left one)
    prev = sorted(previous, key=lambda l: (abs(l.y0), -l.y0, l.id))
    seeds = np.array([l.y0 for l in prev])
    lab = _assign(off, seeds, gate)
    lab[~usable] = -1
    groups = [FeatureGroup(l.id, l.y0, np.nonzero(lab == k)[0]) for k, l in enumerate(prev)]
    rest = np.nonzero((lab < 0) & usable)[0]
    near = rest[x[rest] < cfg.near_range]
    new_seeds = []
    for cl in _cluster_1d(off[near], cfg.cluster_radius):
        if len(cl) < cfg.min_support:
            continue
        m = float(np.mean(off[near][cl]))
        taken = list(seeds) + [s for s, _ in new_seeds]
        if any(abs(m - s) < cfg.min_lane_separation for s in taken):
            continue
        new_seeds.append((m, len(cl)))
    if new_seeds:
        ns = np.array(sorted((s for s, _ in new_seeds), key=lambda s: (abs(s), -s)))
        lab2 = _assign(off[rest], ns, gate)
        for k, s in enumerate(ns):
            groups.append(FeatureGroup(None, float(s), rest[lab2 == k]))
        rest = rest[lab2 < 0]
    ungrouped = np.sort(np.concatenate([rest, np.nonzero(~usable)[0]]))
    return Grouping(groups, ungrouped)


class LaneOffset(NamedTuple):
    lane_id: Optional[int]
    y0: float
    support: int
    variance: float


def fit_lane_offsets(grouping: Grouping | Sequence[FeatureGroup], features: Sequence[LaneFeature],
                     base: BaseClothoid, cfg: LaneModelConfig | None = None) -> list:
    """Confidence-weighted least-squares offset of each group against the base course."""
    cfg = cfg or LaneModelConfig()
    groups = grouping.groups if isinstance(grouping, Grouping) else list(grouping)
    x, off = _offsets(features, base) if features else (np.empty(0), np.empty(0))
    w = np.array([max(f.confidence, 1e-6) for f in features])
    out = []
    for g in groups:
        m = g.members
        if len(m) < cfg.min_support:
            continue
        wm = w[m]
        y0 = float(np.sum(wm * off[m]) / np.sum(wm))
        s2 = float(np.sum(wm * (off[m] - y0) ** 2) / np.sum(wm)) * len(m) / max(len(m) - 1, 1)
        out.append(LaneOffset(g.lane_id, y0, len(m), s2 / len(m)))
    return out


class LaneTracker:
    """Kalman-filtered boundary clothoids; state (y0, theta0, c0, c1) per lane."""

    def __init__(self, cfg: LaneModelConfig | None = None):
        self.cfg = cfg or LaneModelConfig()
        self.lanes: list[TrackedLane] = []
        self._next_id = 0

    def _q(self, dt: float) -> np.ndarray:
        c = self.cfg
        scale = dt / c.nominal_dt if dt > 0 else 1.0
        return np.diag(np.array([c.q_y0, c.q_theta0, c.q_c0, c.q_c1]) ** 2) * scale

    def predict(self, dt: float, motion: Pose2 | None = None) -> None:
        dx = motion.x if motion is not None else 0.0
        f = np.array([
            [1.0, dx, dx * dx / 2.0, dx**3 / 6.0],
            [0.0, 1.0, dx, dx * dx / 2.0],
            [0.0, 0.0, 1.0, dx],
            [0.0, 0.0, 0.0, 1.0],
        ])
        u = np.zeros(4) if motion is None else np.array([-motion.y, -motion.theta, 0.0, 0.0])
        q = self._q(dt)
        for lane in self.lanes:
            lane.state = f @ lane.state + u
            lane.covariance = f @ lane.covariance @ f.T + q

    def correct(self, base: Optional[BaseClothoid], offsets: Sequence[LaneOffset]) -> None:
        c = self.cfg
        floor = np.asarray(c.min_measurement_sigma) ** 2
        by_id = {o.lane_id: o for o in offsets if o.lane_id is not None}
        for lane in self.lanes:
            o = by_id.get(lane.id)
            lane.age += 1
            if base is None and o is None:
                lane.support = 0
                lane.unsupported += 1
                continue
            rows, z, r = [], [], np.zeros((4, 4))
            if o is not None:
                rows.append(0)
                z.append(o.y0)
            if base is not None:
                rows += [1, 2, 3]
                z += [base.theta0, base.c0, base.c1]
            r[0, 0] = max(o.variance, floor[0]) if o is not None else 1.0
            if base is not None:
                r[1:, 1:] = base.covariance + np.diag(floor[1:])
            rows = np.array(rows)
            h = np.eye(4)[rows]
            rr = r[np.ix_(rows, rows)]
            innov = np.array(z) - h @ lane.state
            s = h @ lane.covariance @ h.T + rr
            k = lane.covariance @ h.T @ np.linalg.inv(s)
            lane.state = lane.state + k @ innov
            ikh = np.eye(4) - k @ h
            lane.covariance = ikh @ lane.covariance @ ikh.T + k @ rr @ k.T
            lane.covariance = 0.5 * (lane.covariance + lane.covariance.T)
            if o is not None:
                lane.support = o.support
                lane.unsupported = 0
            else:
                lane.support = 0
                lane.unsupported += 1
        self.lanes = [l for l in self.lanes if l.unsupported < c.expiry_frames]
        if base is not None:
            for o in offsets:
                if o.lane_id is None:
                    self._spawn(o, base)
        self._merge()
        self.lanes.sort(key=lambda l: -l.y0)

    def _spawn(self, o: LaneOffset, base: BaseClothoid) -> None:
        st = np.array([o.y0, base.theta0, base.c0, base.c1])
        cov = np.diag(np.asarray(self.cfg.init_sigma, dtype=float) ** 2)
        self.lanes.append(TrackedLane(self._next_id, st, cov, age=0, support=o.support))
        self._next_id += 1

    def _merge(self) -> None:
        sep = self.cfg.min_lane_separation
        keep: list[TrackedLane] = []
        for lane in sorted(self.lanes, key=lambda l: (-l.age, l.id)):
            if all(abs(lane.y0 - k.y0) >= sep for k in keep):
                keep.append(lane)
        self.lanes = keep

    def snapshot(self) -> list:
        return lanes_snapshot(self.lanes, self.cfg.horizon)


def update_tracked_lanes(lanes: Sequence[TrackedLane], base: Optional[BaseClothoid],
                         offsets: Sequence[LaneOffset], dt: float, motion: Pose2 | None = None,
                         cfg: LaneModelConfig | None = None, next_id: int | None = None) -> list:
    """Functional wrapper: predict then correct a copy of ``lanes``."""
    tr = LaneTracker(cfg)
    tr.lanes = [TrackedLane(l.id, l.state.copy(), l.covariance.copy(), l.age, l.support, l.unsupported)
                for l in lanes]
    tr._next_id = next_id if next_id is not None else (max((l.id for l in lanes), default=-1) + 1)
    tr.predict(dt, motion)
    tr.correct(base, offsets)
    return tr.lanes


def lanes_snapshot(lanes: Sequence[TrackedLane], horizon: float = 120.0) -> list:
    """Clothoids of the live lanes, left-most (largest y0) first."""
    return [l.clothoid(horizon) for l in sorted(lanes, key=lambda l: -l.y0)]
