"""Lateral-deviation evaluation of estimated lanes against the ground-truth map.

Every estimated boundary is sampled every 10 m out to 120 m and compared
with the true boundary it matches at x = 0.  Deviations are accumulated per
sample distance and lane class with streaming moments, so tables from
separate runs can be merged.
"""
from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .geometry import Clothoid

DISTANCES = tuple(range(0, 130, 10))
TABLE_DISTANCES = (0, 20, 40, 60, 80, 100, 120)
MATCH_GATE = 1.5
CLASSES = ("ego", "adjacent", "other")
CSV_COLUMNS = ("distance", "class", "n", "mean", "sigma", "rmse")


@dataclass(frozen=True)
class Sample:
    distance: float
    lane_class: str
    side: str          # "left" or "right" of the ego vehicle
    deviation: float   # estimate minus truth, positive toward +y


@dataclass
class FrameDeviations:
    samples: list = field(default_factory=list)
    unmatched: int = 0
    matched: int = 0


def _truth_y(poly: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Lateral offset of a vehicle-frame polyline at the given x (NaN outside it)."""
    if len(poly) < 2:
        return np.full(len(xs), np.nan)
    x, y = poly[:, 0], poly[:, 1]
    if x[-1] < x[0]:
        x, y = x[::-1], y[::-1]
    keep = np.concatenate([[True], np.diff(x) > 0])
    x, y = x[keep], y[keep]
    return np.interp(xs, x, y, left=np.nan, right=np.nan)


def classify_boundaries(y0: Sequence[float]) -> list:
    """Label true boundaries by their offset at x = 0.

    The two boundaries enclosing the ego position bound the ego lane; the
    next one outward on each side closes an adjacent lane.
    """
    y0 = np.asarray(y0, dtype=float)
    labels = ["other"] * len(y0)
    left = sorted((i for i in range(len(y0)) if np.isfinite(y0[i]) and y0[i] >= 0.0), key=lambda i: y0[i])
    right = sorted((i for i in range(len(y0)) if np.isfinite(y0[i]) and y0[i] < 0.0), key=lambda i: -y0[i])
    for side in (left, right):
        for rank, i in enumerate(side[:2]):
            labels[i] = CLASSES[rank]
    return labels


def frame_deviations(lanes: Sequence[Clothoid], truth: Sequence[np.ndarray],
                     distances: Sequence[float] = DISTANCES, gate: float = MATCH_GATE) -> FrameDeviations:
    """Signed lateral deviations of estimated lanes from the truth, one frame.

    ``truth`` holds boundary polylines in the same vehicle frame as the lanes.
    A lane is matched to the true boundary nearest to it at x = 0; lanes
    farther than ``gate`` from every boundary are counted as unmatched.
    """
    xs = np.asarray(distances, dtype=float)
    ty = np.array([_truth_y(np.asarray(b), xs) for b in truth]) if len(truth) else np.zeros((0, len(xs)))
    out = FrameDeviations()
    if not len(ty):
        out.unmatched = len(lanes)
        return out
    t0 = np.array([_truth_y(np.asarray(b), np.zeros(1))[0] for b in truth])
    labels = classify_boundaries(t0)
    for lane in lanes:
        d0 = np.abs(t0 - lane.y(0.0))
        d0 = np.where(np.isfinite(d0), d0, np.inf)
        k = int(np.argmin(d0))          # ties resolve to the lower truth index
        if not d0[k] < gate:
            out.unmatched += 1
            continue
        out.matched += 1
        side = "left" if t0[k] >= 0.0 else "right"
        dev = lane.y(xs) - ty[k]
        for x, d in zip(xs, dev):
            if np.isfinite(d):
                out.samples.append(Sample(float(x), labels[k], side, float(d)))
    return out


@dataclass
class _Moments:
    n: int = 0
    mean: float = 0.0
    m2: float = 0.0

    def add(self, x: float) -> None:
        self.n += 1
        d = x - self.mean
        self.mean += d / self.n
        self.m2 += d * (x - self.mean)

    def merge(self, o: "_Moments") -> "_Moments":
        if o.n == 0:
            return _Moments(self.n, self.mean, self.m2)
        if self.n == 0:
            return _Moments(o.n, o.mean, o.m2)
        n = self.n + o.n
        d = o.mean - self.mean
        return _Moments(n, self.mean + d * o.n / n, self.m2 + o.m2 + d * d * self.n * o.n / n)

    @property
    def sigma(self) -> float:
        return math.sqrt(max(self.m2 / self.n, 0.0)) if self.n else float("nan")

    @property
    def rmse(self) -> float:
        return math.sqrt(self.mean**2 + self.sigma**2) if self.n else float("nan")


class DeviationTable:
    """Streaming mean, sigma and RMSE per (sample distance, lane class).

    Sigma is the population standard deviation, so RMSE² = mean² + sigma².
    Adjacent-lane samples are pooled under ``adjacent`` and also kept per
    side as ``adjacent_left`` / ``adjacent_right``.
    """

    def __init__(self):
        self.cells: dict = {}
        self.unmatched = 0
        self.frames = 0

    def _cell(self, d: float, cls: str) -> _Moments:
        return self.cells.setdefault((float(d), cls), _Moments())

    def add_frame(self, fd: FrameDeviations) -> None:
        self.frames += 1
        self.unmatched += fd.unmatched
        for s in fd.samples:
            self._cell(s.distance, s.lane_class).add(s.deviation)
            if s.lane_class == "adjacent":
                self._cell(s.distance, f"adjacent_{s.side}").add(s.deviation)

    def merge(self, other: "DeviationTable") -> "DeviationTable":
        out = DeviationTable()
        out.frames = self.frames + other.frames
        out.unmatched = self.unmatched + other.unmatched
        for key in set(self.cells) | set(other.cells):
            out.cells[key] = self.cells.get(key, _Moments()).merge(other.cells.get(key, _Moments()))
        return out

    def stats(self, distance: float, cls: str) -> tuple:
        """``(n, mean, sigma, rmse)`` of one cell; NaNs when empty."""
        m = self.cells.get((float(distance), cls), _Moments())
        if not m.n:
            return 0, float("nan"), float("nan"), float("nan")
        return m.n, m.mean, m.sigma, m.rmse

    def rmse(self, cls: str, distances: Sequence[float] = DISTANCES) -> np.ndarray:
        return np.array([self.stats(d, cls)[3] for d in distances])

    def classes(self) -> list:
        order = {c: i for i, c in enumerate(CLASSES + ("adjacent_left", "adjacent_right"))}
        return sorted({c for _, c in self.cells}, key=lambda c: (order.get(c, 99), c))

    def rows(self) -> list:
        out = []
        for cls in self.classes():
            for d in sorted({d for d, c in self.cells if c == cls}):
                n, mu, sg, r = self.stats(d, cls)
                out.append((d, cls, n, mu, sg, r))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for d, cls, n, mu, sg, r in self.rows():
            w.writerow([f"{d:g}", cls, n, f"{mu:.6f}", f"{sg:.6f}", f"{r:.6f}"])
        return buf.getvalue()

    def summary(self) -> dict:
        out = {"frames": self.frames, "unmatched_lanes": self.unmatched, "classes": {}}
        for cls in self.classes():
            rows = {}
            for d, c, n, mu, sg, r in self.rows():
                if c == cls:
                    rows[f"{d:g}"] = {"n": n, "mean": round(mu, 6), "sigma": round(sg, 6), "rmse": round(r, 6)}
            out["classes"][cls] = rows
        out["table"] = {cls: {f"{d}": out["classes"][cls].get(f"{d}", {}).get("rmse") for d in TABLE_DISTANCES}
                        for cls in ("ego", "adjacent") if cls in out["classes"]}
        return out


def accumulate(frames: Iterable[FrameDeviations]) -> DeviationTable:
    t = DeviationTable()
    for fd in frames:
        t.add_frame(fd)
    return t


# ------------------------------------------------------------------ runtime
def measure_frame_runtime(pipeline, frame) -> float:
    """Wall-clock seconds for one full pipeline step; the result is kept on ``pipeline.last``."""
    t0 = time.perf_counter()
    pipeline.process(frame)
    return time.perf_counter() - t0


@dataclass
class RuntimeStats:
    durations: list = field(default_factory=list)   # seconds

    def add(self, d: float) -> None:
        self.durations.append(float(d))

    def summary(self) -> dict:
        d = np.asarray(self.durations) * 1000.0
        if not len(d):
            return {"frames": 0}
        return {
            "frames": int(len(d)),
            "median_ms": float(np.median(d)),
            "mean_ms": float(d.mean()),
            "p95_ms": float(np.percentile(d, 95)),
            "max_ms": float(d.max()),
            "durations_ms": [round(float(x), 3) for x in d],
        }


# -------------------------------------------------------------- whole runs
@dataclass
class EvaluationResult:
    table: Optional[DeviationTable]
    runtime: RuntimeStats
    snapshots: list           # one dict per frame
    track_loss_frames: list = field(default_factory=list)


def lane_snapshot(result) -> dict:
    return {
        "frame": result.index,
        "timestamp": round(result.timestamp, 6),
        "lanes": [{"id": int(i), "y0": c.y0, "theta0": c.theta0, "c0": c.c0, "c1": c.c1}
                  for i, c in zip(result.lane_ids, result.lanes)],
    }


def ego_lane_tracked(lanes: Sequence[Clothoid], truth: Sequence[np.ndarray], gate: float = MATCH_GATE) -> bool:
    """Both ego-lane boundaries have an estimated lane within ``gate`` at x = 0."""
    t0 = np.array([_truth_y(np.asarray(b), np.zeros(1))[0] for b in truth])
    labels = classify_boundaries(t0)
    est = np.array([l.y(0.0) for l in lanes])
    for k, lab in enumerate(labels):
        if lab == "ego" and not (len(est) and np.min(np.abs(est - t0[k])) < gate):
            return False
    return True


def run_pipeline(frames, pipeline, truth=None, warmup: int = 10, on_frame=None) -> EvaluationResult:
    """Feed ``frames`` through ``pipeline``; score against ``truth`` when given.

    The first ``warmup`` frames are processed but neither scored nor timed,
    letting the lane tracks initialise.
    """
    from .simulator import ground_truth_local

    table = DeviationTable() if truth is not None else None
    rt = RuntimeStats()
    snaps = []
    lost = []
    for k, frame in enumerate(frames):
        dt = measure_frame_runtime(pipeline, frame)
        res = pipeline.last
        snaps.append(lane_snapshot(res))
        if on_frame is not None:
            on_frame(k, res)
        if k < warmup:
            continue
        rt.add(dt)
        if truth is not None:
            local = ground_truth_local(truth, truth.ego_pose(frame.index), window=(20.0, 160.0),
                                       ego_arc=float(truth.ego_arc[frame.index]))
            table.add_frame(frame_deviations(res.lanes, local))
            if not ego_lane_tracked(res.lanes, local):
                lost.append(frame.index)
    return EvaluationResult(table, rt, snaps, lost)


def write_report(out_dir, result: EvaluationResult, extra: Optional[dict] = None) -> dict:
    """Write deviation CSV/summary, runtime stats and lane snapshots; returns written paths."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    if result.table is not None:
        p = out / "deviations.csv"
        p.write_text(result.table.to_csv())
        paths["deviations"] = p
        summ = result.table.summary()
        summ["track_loss_frames"] = list(result.track_loss_frames)
        if extra:
            summ.update(extra)
        p = out / "summary.json"
        p.write_text(json.dumps(summ, indent=2, sort_keys=True) + "\n")
        paths["summary"] = p
    p = out / "runtime.json"
    p.write_text(json.dumps(result.runtime.summary(), indent=2) + "\n")
    paths["runtime"] = p
    p = out / "lanes.jsonl"
    with p.open("w") as fh:
        for s in result.snapshots:
            fh.write(json.dumps(s, sort_keys=True) + "\n")
    paths["lanes"] = p
    return paths
