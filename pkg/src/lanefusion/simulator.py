"""Synthetic highway scenarios with ground truth and noisy sensor reports.

The road is a chain of clothoid segments in a flat global plane; lanes
are parallel offsets of that reference line. Lane 0 is the right-most
lane and boundary ``j`` separates lanes ``j-1`` and ``j``.

Object tracks and the lateral wander of drivers (ego and objects) drift
smoothly, modelled as sums of slow sinusoids with random phases; a
track's heading error follows the rate of its lateral error, as for a
filtered track, plus a small first-order Gauss-Markov term.  Raw
per-frame detections (HRC points, SMC clothoid parameters, odometry) get
white noise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import (
    Clothoid,
    ControlVector,
    LaneFeature,
    Pose2,
    ctrv_motion,
    pose_between,
    pose_compose,
    rotate_covariance,
)
from .ingest import HrcFeatureReport, SmcLaneReport, TrackedObject


class ScenarioError(ValueError):
    pass


@dataclass
class RoadSegment:
    length: float
    c0: float = 0.0     # curvature at the segment start, 1/m
    c1: float = 0.0     # curvature rate, 1/m²


@dataclass
class EgoConfig:
    lane: int = 1
    speed: float = 30.0
    start: float = 60.0           # arc length at t = 0, m
    wander_sigma: float = 0.1     # m
    wander_tau: float = 10.0      # s, shortest wander period


@dataclass
class SmcNoise:
    sigmas: tuple = (0.05, 0.002, 2e-5, 2e-7)          # y0, theta0, c0, c1 (actual)
    tau: float = 1.0              # s, correlation time of the parameter errors (0: white)
    reported_floor: tuple = (0.02, 0.001, 1e-5, 1e-7)
    range: float = 90.0
    confidence: float = 0.8


@dataclass
class HrcNoise:
    spacing: float = 3.0          # m between marking points along a boundary
    min_range: float = 2.0
    range: float = 130.0
    sigma0: float = 0.1           # m, position sigma = sigma0 + sigma_slope * x
    sigma_slope: float = 0.002
    sigma_theta: float = 0.01     # rad
    along_sigma: float = 1.0      # m, reported along-marking sigma
    detection_prob: float = 0.9
    outlier_rate: float = 0.02
    outlier_min: float = 0.5      # m, lateral offset of false detections
    outlier_max: float = 2.0
    confidence: float = 0.6
    reported_floor_pos: float = 0.05
    reported_floor_theta: float = 0.005


@dataclass
class ObjectNoise:
    sigma_pos: float = 0.3        # m, tracking error per axis
    tau: float = 4.0              # s, shortest period of the (smooth) tracking error
    sigma_theta: float = 0.003    # rad, heading error on top of the one implied by the lateral error
    theta_tau: float = 2.0        # s, correlation time of that extra heading error
    driver_sigma: float = 0.25    # m, lateral offset from the lane middle
    driver_tau: float = 10.0      # s, shortest period of the driver's lateral wander
    confirm_range: float = 130.0  # m, objects beyond are radar-only (unconfirmed)
    report_min: float = -60.0     # m, local x window in which objects are reported
    report_max: float = 200.0
    reported_floor_pos: float = 0.1
    reported_floor_theta: float = 0.005


@dataclass
class OdometryNoise:
    speed_sigma: float = 0.05     # m/s
    yaw_rate_sigma: float = 0.001  # rad/s


@dataclass
class SensorConfig:
    smc: SmcNoise = field(default_factory=SmcNoise)
    hrc: HrcNoise = field(default_factory=HrcNoise)
    objects: ObjectNoise = field(default_factory=ObjectNoise)
    odometry: OdometryNoise = field(default_factory=OdometryNoise)


@dataclass
class ObjectSpec:
    id: int
    lane: int
    gap: float                    # arc length ahead of the ego vehicle at t = 0, m
    speed: float


@dataclass
class LaneChange:
    object: int
    time: float
    from_lane: int
    to_lane: int
    duration: float = 3.0


@dataclass
class TrafficConfig:
    objects: list = field(default_factory=list)
    lane_changes: list = field(default_factory=list)
    count: int = 0                # extra objects placed at random
    speed_spread: float = 1.5     # m/s, for random objects
    window_behind: float = 60.0   # m, objects falling further behind respawn ahead
    window_ahead: float = 200.0   # m, objects further ahead respawn behind


@dataclass
class Dropout:
    boundary: int
    start: float                  # global arc length, m
    end: float


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    seed: int = 0
    duration: float = 20.0
    frame_rate: float = 10.0
    lane_count: int = 3
    lane_width: float = 3.5
    road: list = field(default_factory=lambda: [RoadSegment(3000.0)])
    ego: EgoConfig = field(default_factory=EgoConfig)
    sensors: SensorConfig = field(default_factory=SensorConfig)
    traffic: TrafficConfig = field(default_factory=TrafficConfig)
    dropouts: list = field(default_factory=list)

    def validate(self) -> None:
        if self.lane_count < 1:
            raise ScenarioError("lane_count must be at least 1")
        if not self.frame_rate > 0:
            raise ScenarioError("frame_rate must be positive")
        if not self.duration > 0:
            raise ScenarioError("duration must be positive")
        if not self.lane_width > 0:
            raise ScenarioError("lane_width must be positive")
        if not self.road or any(seg.length <= 0 for seg in self.road):
            raise ScenarioError("road needs at least one segment of positive length")
        if not 0 <= self.ego.lane < self.lane_count:
            raise ScenarioError(f"ego lane {self.ego.lane} does not exist")
        if self.ego.speed < 0:
            raise ScenarioError("ego speed must be non-negative")
        for name, val in _sigma_fields(self.sensors):
            if val < 0:
                raise ScenarioError(f"{name} must be non-negative")
        ids = set()
        for o in self.traffic.objects:
            if not 0 <= o.lane < self.lane_count:
                raise ScenarioError(f"object {o.id}: lane {o.lane} does not exist")
            if o.id in ids:
                raise ScenarioError(f"duplicate object id {o.id}")
            ids.add(o.id)
        for lc in self.traffic.lane_changes:
            if lc.object not in ids:
                raise ScenarioError(f"lane change for unknown object {lc.object}")
            for lane in (lc.from_lane, lc.to_lane):
                if not 0 <= lane < self.lane_count:
                    raise ScenarioError(f"lane change of object {lc.object} to nonexistent lane {lane}")
            if lc.duration <= 0:
                raise ScenarioError("lane change duration must be positive")
        for lc, lane in _lane_change_chain(self.traffic):
            if lc.from_lane != lane:
                raise ScenarioError(
                    f"object {lc.object} is in lane {lane} at t={lc.time}, not lane {lc.from_lane}"
                )
        for d in self.dropouts:
            if not 0 <= d.boundary <= self.lane_count:
                raise ScenarioError(f"dropout boundary {d.boundary} does not exist")
            if d.end <= d.start:
                raise ScenarioError("dropout end must lie after its start")


def _sigma_fields(sensors: SensorConfig):
    for group in ("smc", "hrc", "objects", "odometry"):
        obj = getattr(sensors, group)
        for k, v in vars(obj).items():
            if "sigma" in k or k in ("sigmas", "reported_floor"):
                vals = v if isinstance(v, (tuple, list)) else (v,)
                for x in vals:
                    yield f"sensors.{group}.{k}", x
        if group == "hrc":
            for k in ("outlier_rate", "detection_prob"):
                v = getattr(obj, k)
                if not 0.0 <= v <= 1.0:
                    yield f"sensors.hrc.{k} (probability)", -1.0


def _lane_change_chain(traffic: TrafficConfig):
    lanes = {o.id: o.lane for o in traffic.objects}
    for lc in sorted(traffic.lane_changes, key=lambda c: (c.object, c.time)):
        yield lc, lanes[lc.object]
        lanes[lc.object] = lc.to_lane


# ---------------------------------------------------------------- road model
class Road:
    """Reference line built from clothoid segments, sampled on a fine arc-length grid."""

    def __init__(self, segments, min_length: float = 0.0, ds: float = 0.1):
        segs = [RoadSegment(s.length, s.c0, s.c1) for s in segments]
        total = sum(s.length for s in segs)
        if total < min_length:
            segs.append(RoadSegment(min_length - total + 1.0, 0.0, 0.0))
        self.segments = segs
        self.starts = np.cumsum([0.0] + [s.length for s in segs[:-1]])
        th0 = [0.0]
        for s in segs[:-1]:
            th0.append(th0[-1] + s.c0 * s.length + s.c1 * s.length**2 / 2.0)
        self.theta_starts = np.array(th0)
        self.length = float(sum(s.length for s in segs))
        n = int(math.ceil(self.length / ds))
        self.s = np.linspace(0.0, n * ds, n + 1)
        th = self.heading(self.s)
        c, sn = np.cos(th), np.sin(th)
        # trapezoidal integration of the unit tangent
        x = np.concatenate([[0.0], np.cumsum(0.5 * (c[1:] + c[:-1]) * np.diff(self.s))])
        y = np.concatenate([[0.0], np.cumsum(0.5 * (sn[1:] + sn[:-1]) * np.diff(self.s))])
        self.xy = np.column_stack([x, y])

    def _seg(self, s):
        s = np.asarray(s, dtype=float)
        k = np.clip(np.searchsorted(self.starts, s, side="right") - 1, 0, len(self.segments) - 1)
        return k, s - self.starts[k]

    def heading(self, s):
        k, u = self._seg(s)
        c0 = np.array([g.c0 for g in self.segments])[k]
        c1 = np.array([g.c1 for g in self.segments])[k]
        return self.theta_starts[k] + c0 * u + c1 * u * u / 2.0

    def curvature(self, s):
        k, u = self._seg(s)
        c0 = np.array([g.c0 for g in self.segments])[k]
        c1 = np.array([g.c1 for g in self.segments])[k]
        return c0 + c1 * u

    def point(self, s, d=0.0):
        """Global position and heading at arc length s, lateral offset d (left positive)."""
        s = np.asarray(s, dtype=float)
        th = self.heading(s)
        x = np.interp(s, self.s, self.xy[:, 0])
        y = np.interp(s, self.s, self.xy[:, 1])
        d = np.asarray(d, dtype=float)
        return np.stack([x - d * np.sin(th), y + d * np.cos(th)], axis=-1), th


def boundary_offsets(lane_count: int, lane_width: float) -> np.ndarray:
    return (np.arange(lane_count + 1) - lane_count / 2.0) * lane_width


def lane_center(lane: int, lane_count: int, lane_width: float) -> float:
    return (lane + 0.5 - lane_count / 2.0) * lane_width


def to_local(points: np.ndarray, pose: Pose2) -> np.ndarray:
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    d = np.asarray(points, dtype=float) - np.array([pose.x, pose.y])
    return np.column_stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1]])


def to_global(points: np.ndarray, pose: Pose2) -> np.ndarray:
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    p = np.asarray(points, dtype=float)
    return np.column_stack([pose.x + c * p[:, 0] - s * p[:, 1], pose.y + s * p[:, 0] + c * p[:, 1]])


# ------------------------------------------------------------- ground truth
@dataclass(eq=False)
class GroundTruthMap:
    """True lane-boundary polylines (global frame) and the ego trajectory."""

    boundaries: list                  # one (n, 2) array per boundary, right-most first
    ego_poses: np.ndarray             # (k, 3) global x, y, heading per frame
    timestamps: np.ndarray
    lane_width: float
    arc_length: Optional[np.ndarray] = None   # common arc-length grid of the polylines
    ego_arc: Optional[np.ndarray] = None      # arc length of the ego per frame

    def ego_pose(self, k: int) -> Pose2:
        return Pose2.from_array(self.ego_poses[k])


def ground_truth_local(truth: GroundTruthMap, ego_pose: Pose2, window: tuple | None = None,
                       ego_arc: float | None = None) -> list:
    """Boundary polylines in the vehicle frame of ``ego_pose``.

    With ``window=(behind, ahead)`` and the ego arc length, only that stretch
    of each polyline is transformed.
    """
    out = []
    sl = slice(None)
    if window is not None and ego_arc is not None and truth.arc_length is not None:
        a = np.searchsorted(truth.arc_length, ego_arc - window[0])
        b = np.searchsorted(truth.arc_length, ego_arc + window[1])
        sl = slice(max(a - 1, 0), b + 1)
    for b in truth.boundaries:
        out.append(to_local(b[sl], ego_pose))
    return out


# ------------------------------------------------------------ sensor frames
@dataclass(eq=False)
class SensorFrame:
    index: int
    timestamp: float
    control: ControlVector
    smc: Optional[SmcLaneReport]
    hrc: Optional[HrcFeatureReport]
    objects: list


class _GaussMarkov:
    """Stationary first-order Gauss-Markov process with given sigma and correlation time."""

    def __init__(self, rng, sigma: float, tau: float, dt: float, size: int = 1):
        self.rng = rng
        self.sigma = sigma
        self.a = math.exp(-dt / tau) if tau > 0 else 0.0
        self.b = sigma * math.sqrt(1.0 - self.a**2)
        self.x = rng.normal(0.0, sigma, size) if sigma > 0 else np.zeros(size)

    def step(self) -> np.ndarray:
        if self.sigma > 0:
            self.x = self.a * self.x + self.b * self.rng.normal(0.0, 1.0, self.x.shape)
        return self.x


class _Wander:
    """Smooth zero-mean lateral wander: a few slow sinusoids with random phase.

    The RMS value equals ``sigma``; unlike a first-order Gauss-Markov
    process the path is differentiable, so the implied heading is smooth.
    """

    def __init__(self, rng, sigma: float, period: tuple = (10.0, 40.0), terms: int = 3):
        self.sigma = sigma
        self.freq = 2.0 * math.pi / rng.uniform(period[0], period[1], terms)
        self.phase = rng.uniform(0.0, 2.0 * math.pi, terms)
        self.amp = sigma * math.sqrt(2.0 / terms)

    def value(self, t: float) -> float:
        if self.sigma == 0:
            return 0.0
        return float(self.amp * np.sum(np.sin(self.freq * t + self.phase)))

    def rate(self, t: float) -> float:
        if self.sigma == 0:
            return 0.0
        return float(self.amp * np.sum(self.freq * np.cos(self.freq * t + self.phase)))

    @property
    def rate_rms(self) -> float:
        return float(self.amp * math.sqrt(np.sum(self.freq**2) / 2.0)) if self.sigma else 0.0


def _blend(t: float, lc: LaneChange, lane_count: int, lane_width: float) -> float:
    """Lateral offset added by a lane change at time t (raised-cosine blend)."""
    if t <= lc.time:
        return 0.0
    d = lane_center(lc.to_lane, lane_count, lane_width) - lane_center(lc.from_lane, lane_count, lane_width)
    u = min((t - lc.time) / lc.duration, 1.0)
    return d * 0.5 * (1.0 - math.cos(math.pi * u))


def _blend_rate(t: float, lc: LaneChange, lane_count: int, lane_width: float) -> float:
    if not lc.time < t < lc.time + lc.duration:
        return 0.0
    d = lane_center(lc.to_lane, lane_count, lane_width) - lane_center(lc.from_lane, lane_count, lane_width)
    u = (t - lc.time) / lc.duration
    return d * 0.5 * math.pi / lc.duration * math.sin(math.pi * u)


class _Object:
    def __init__(self, spec: ObjectSpec, s0: float, cfg: ScenarioConfig, rng, dt: float):
        no = cfg.sensors.objects
        self.spec = spec
        self.track_id = spec.id
        self.respawns = 0
        self.s = s0
        self.rng = rng
        self.driver = _Wander(rng, no.driver_sigma, (no.driver_tau, 4.0 * no.driver_tau))
        period = (no.tau, 4.0 * no.tau)
        self.err = (_Wander(rng, no.sigma_pos, period), _Wander(rng, no.sigma_pos, period))
        self.err_th = _GaussMarkov(rng, no.sigma_theta, no.theta_tau, dt)
        self.changes = sorted([lc for lc in cfg.traffic.lane_changes if lc.object == spec.id],
                              key=lambda c: c.time)

    def lateral(self, t: float, cfg: ScenarioConfig) -> tuple[float, float]:
        """Lateral offset from the reference line and its time derivative."""
        d = lane_center(self.spec.lane, cfg.lane_count, cfg.lane_width) + self.driver.value(t)
        rate = self.driver.rate(t)
        for lc in self.changes:
            d += _blend(t, lc, cfg.lane_count, cfg.lane_width)
            rate += _blend_rate(t, lc, cfg.lane_count, cfg.lane_width)
        return d, rate

    def lane_changing(self, t: float) -> bool:
        return any(lc.time < t < lc.time + lc.duration for lc in self.changes)


def _fit_local_clothoid(local: np.ndarray, x_max: float) -> Optional[np.ndarray]:
    m = (local[:, 0] >= 0.0) & (local[:, 0] <= x_max)
    if m.sum() < 8:
        return None
    p = np.polyfit(local[m, 0], local[m, 1], 3)
    return np.array([p[3], p[2], 2.0 * p[1], 6.0 * p[0]])


def generate(cfg: ScenarioConfig):
    """Simulate a scenario; returns ``(GroundTruthMap, list[SensorFrame])``.

    Output is a pure function of ``cfg`` (including its seed).
    """
    cfg.validate()
    dt = 1.0 / cfg.frame_rate
    nframes = int(math.floor(cfg.duration * cfg.frame_rate + 1e-9)) + 1
    span = cfg.ego.start + cfg.ego.speed * cfg.duration + cfg.traffic.window_ahead + 250.0
    road = Road(cfg.road, min_length=span)
    lc, lw = cfg.lane_count, cfg.lane_width
    offs = boundary_offsets(lc, lw)
    ss = np.random.SeedSequence(cfg.seed)
    rng_ego, rng_odo, rng_smc, rng_hrc, rng_traffic = (np.random.default_rng(s) for s in ss.spawn(5))

    # ground-truth polylines on a 0.5 m grid
    s_grid = np.arange(0.0, road.length, 0.5)
    boundaries = [road.point(s_grid, d)[0] for d in offs]

    # objects
    sens = cfg.sensors
    specs = list(cfg.traffic.objects)
    next_id = max([o.id for o in specs], default=0) + 1
    for _ in range(cfg.traffic.count):
        specs.append(ObjectSpec(
            next_id, int(rng_traffic.integers(0, lc)), float(rng_traffic.uniform(-20.0, 150.0)),
            float(cfg.ego.speed + rng_traffic.uniform(-cfg.traffic.speed_spread, cfg.traffic.speed_spread)),
        ))
        next_id += 1
    obj_rngs = [np.random.default_rng(s) for s in ss.spawn(len(specs))]
    objects = [_Object(o, cfg.ego.start + o.gap, cfg, r, dt) for o, r in zip(specs, obj_rngs)]

    hrc_phase = rng_hrc.uniform(0.0, sens.hrc.spacing, lc + 1)
    smc_err = _GaussMarkov(rng_smc, 1.0, sens.smc.tau, dt, 8)
    wander = _Wander(rng_ego, cfg.ego.wander_sigma, (cfg.ego.wander_tau, 4.0 * cfg.ego.wander_tau))
    ego_center = lane_center(cfg.ego.lane, lc, lw)

    frames = []
    ego_poses = np.zeros((nframes, 3))
    ego_arc = np.zeros(nframes)
    pose = None
    for k in range(nframes):
        t = k * dt
        s_e = cfg.ego.start + cfg.ego.speed * t
        d_e = ego_center + wander.value(t)
        pt, th = road.point(s_e, d_e)
        slope = wander.rate(t) / cfg.ego.speed if cfg.ego.speed > 0 else 0.0
        desired = Pose2(pt[0], pt[1], float(th) + math.atan(slope))
        if pose is None:
            pose = desired
            u_true = ControlVector(0.0, cfg.ego.speed, dt)
        else:
            rel = pose_between(pose, desired)
            yaw_rate = rel.theta / dt
            chord = math.hypot(rel.x, rel.y)
            half = rel.theta / 2.0
            speed = chord / dt * (half / math.sin(half) if abs(half) > 1e-12 else 1.0)
            u_true = ControlVector(yaw_rate, speed, dt)
            pose = pose_compose(pose, ctrv_motion(u_true))
        ego_poses[k] = pose.as_array()
        ego_arc[k] = s_e
        on = sens.odometry
        u = ControlVector(
            u_true.yaw_rate + (rng_odo.normal(0.0, on.yaw_rate_sigma) if on.yaw_rate_sigma > 0 else 0.0),
            max(0.0, u_true.speed + (rng_odo.normal(0.0, on.speed_sigma) if on.speed_sigma > 0 else 0.0)),
            dt,
        )

        local_b = [to_local(b[_window(s_grid, s_e, 20.0, 160.0)], pose) for b in boundaries]
        smc = _simulate_smc(cfg, local_b, s_e, smc_err.step() if k > 0 else smc_err.x, pose, road)
        hrc = _simulate_hrc(cfg, road, offs, hrc_phase, s_e, pose, rng_hrc)
        objs = _simulate_objects(cfg, objects, road, t, dt, s_e, pose, k)
        frames.append(SensorFrame(k, round(t, 9), u, smc, hrc, objs))

    truth = GroundTruthMap(boundaries, ego_poses, np.array([f.timestamp for f in frames]), lw,
                           arc_length=s_grid, ego_arc=ego_arc)
    return truth, frames


def _window(s_grid: np.ndarray, s: float, behind: float, ahead: float) -> slice:
    a = int(np.searchsorted(s_grid, s - behind))
    b = int(np.searchsorted(s_grid, s + ahead))
    return slice(max(a - 1, 0), b + 1)


def _dropped(cfg: ScenarioConfig, boundary: int, s) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    m = np.zeros(s.shape, dtype=bool)
    for d in cfg.dropouts:
        if d.boundary == boundary:
            m |= (s >= d.start) & (s <= d.end)
    return m


def _simulate_smc(cfg, local_b, s_e, err, pose, road) -> Optional[SmcLaneReport]:
    """Ego-lane clothoids; ``err`` holds the standardised parameter errors (left then right)."""
    sm = cfg.sensors.smc
    if sm.range <= 0:
        return None
    # ego lane = the two boundaries bracketing the vehicle at x = 0
    y0s = []
    for b in local_b:
        order = np.argsort(b[:, 0])
        y0s.append(float(np.interp(0.0, b[order, 0], b[order, 1])))
    y0s = np.array(y0s)
    right = np.nonzero(y0s < 0.0)[0]
    left = np.nonzero(y0s >= 0.0)[0]
    if len(right) == 0 or len(left) == 0:
        return None
    jr, jl = int(right[np.argmax(y0s[right])]), int(left[np.argmin(y0s[left])])
    rng_range = sm.range
    sides = {}
    sig = np.asarray(sm.sigmas, dtype=float)
    for name, j in (("left", jl), ("right", jr)):
        drop = [d for d in cfg.dropouts if d.boundary == j and d.end >= s_e and d.start <= s_e + sm.range]
        if any(d.start <= s_e + 10.0 for d in drop):
            sides[name] = None
            continue
        if drop:
            rng_range = min(rng_range, min(d.start for d in drop) - s_e)
        sides[name] = j
    noise = {"left": err[:4] * sig, "right": err[4:] * sig}
    out = {}
    for name, j in sides.items():
        if j is None:
            out[name] = None
            continue
        p = _fit_local_clothoid(local_b[j], rng_range)
        if p is None:
            out[name] = None
            continue
        p = p + noise[name]
        out[name] = Clothoid(float(p[0]), float(np.clip(p[1], -0.26, 0.26)), float(p[2]), float(p[3]),
                             0.0, float(max(rng_range, 1.0)))
    if out["left"] is None and out["right"] is None:
        return None
    rep_sig = tuple(float(max(a, b)) for a, b in zip(sm.sigmas, sm.reported_floor))
    return SmcLaneReport(out["left"], out["right"], float(max(min(rng_range, 90.0), 0.0)), rep_sig, sm.confidence)


def _simulate_hrc(cfg, road, offs, phase, s_e, pose, rng) -> HrcFeatureReport:
    h = cfg.sensors.hrc
    feats = []
    for j, d in enumerate(offs):
        k0 = math.floor((s_e - 10.0 - phase[j]) / h.spacing)
        k1 = math.ceil((s_e + h.range + 20.0 - phase[j]) / h.spacing)
        s = phase[j] + h.spacing * np.arange(k0, k1 + 1)
        s = s[~_dropped(cfg, j, s)]
        if len(s) == 0:
            continue
        pts, th = road.point(s, d)
        loc = to_local(pts, pose)
        lth = th - pose.theta
        m = (loc[:, 0] >= h.min_range) & (loc[:, 0] <= h.range)
        loc, lth = loc[m], lth[m]
        n = len(loc)
        det = rng.random(n) < h.detection_prob
        sig = h.sigma0 + h.sigma_slope * loc[:, 0]
        noise = rng.normal(0.0, 1.0, (n, 3))
        out_mask = rng.random(n) < h.outlier_rate
        out_off = rng.uniform(h.outlier_min, h.outlier_max, n) * rng.choice([-1.0, 1.0], n)
        for q in np.nonzero(det)[0]:
            x, y, t = loc[q, 0], loc[q, 1], float(lth[q])
            ct, st = math.cos(t), math.sin(t)
            lat = sig[q] * noise[q, 1] + (out_off[q] if out_mask[q] else 0.0)
            along = sig[q] * noise[q, 0]
            x2 = x + along * ct - lat * st
            y2 = y + along * st + lat * ct
            t2 = t + h.sigma_theta * noise[q, 2]
            if x2 > h.range:
                continue
            sr = max(sig[q], h.reported_floor_pos)
            cov = rotate_covariance(np.diag([h.along_sigma**2, sr**2, max(h.sigma_theta, h.reported_floor_theta) ** 2]), t)
            feats.append(LaneFeature.trusted(Pose2(x2, y2, t2), h.confidence, cov))
    return HrcFeatureReport(tuple(feats), min(h.range, 130.0))


def _simulate_objects(cfg, objects, road, t, dt, s_e, pose, k) -> list:
    no = cfg.sensors.objects
    tr = cfg.traffic
    out = []
    for ob in objects:
        if k > 0:
            ob.s += ob.spec.speed * dt
            ob.err_th.step()
        rel = ob.s - s_e
        if rel > tr.window_ahead or rel < -tr.window_behind:
            # leave the window: reappear at the other end as a new track
            ob.s = s_e - tr.window_behind + 10.0 if rel > 0 else s_e + tr.window_ahead - 20.0
            ob.respawns += 1
            ob.track_id = ob.spec.id + 1000 * ob.respawns
        d, rate = ob.lateral(t, cfg)
        slope = rate / max(ob.spec.speed, 0.1)
        pt, th = road.point(ob.s, d)
        loc = to_local(pt[None, :], pose)[0]
        heading = float(th) - pose.theta + math.atan(slope)
        x = loc[0] + ob.err[0].value(t)
        y = loc[1] + ob.err[1].value(t)
        if not no.report_min <= x <= no.report_max:
            continue
        v = max(ob.spec.speed, 0.1)
        heading += math.atan(ob.err[1].rate(t) / v) + float(ob.err_th.x[0])
        sp = max(no.sigma_pos, no.reported_floor_pos)
        st = max(math.hypot(ob.err[1].rate_rms / v, no.sigma_theta), no.reported_floor_theta)
        cov = np.diag([sp**2, sp**2, st**2])
        confirmed = 0.0 < x <= no.confirm_range
        out.append(TrackedObject(ob.track_id, Pose2(x, y, heading), ob.spec.speed, cov, confirmed))
    return out


def object_lane_change_windows(cfg: ScenarioConfig) -> dict:
    """Object id -> list of (start, end) times of its lane changes."""
    out: dict = {}
    for lc in cfg.traffic.lane_changes:
        out.setdefault(lc.object, []).append((lc.time, lc.time + lc.duration))
    return out
