"""Per-frame processing chain: ingest, graph update, solve, lane modelling."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .config import PipelineConfig
from .geometry import Pose2
from .graph import FusionGraph
from .ingest import (
    LaneWidthTracker,
    eligible_objects,
    ingest_hrc_features,
    lane_width_estimate,
    object_to_features,
    sample_smc_features,
)
from .lane_model import BaseClothoid, LaneTracker, NoFitError, fit_base_clothoid, fit_lane_offsets, group_features
from .optimizer import SolveReport, extract_fused_features, solve


@dataclass
class FrameResult:
    index: int
    timestamp: float
    lanes: list                      # Clothoid per tracked boundary, left-most first
    lane_ids: list
    base: Optional[BaseClothoid]
    solve: SolveReport
    counts: dict = field(default_factory=dict)


class LanePipeline:
    """Stateful lane estimator; feed it :class:`SensorFrame` objects in order."""

    def __init__(self, cfg: PipelineConfig | None = None):
        self.cfg = cfg or PipelineConfig()
        self.graph = FusionGraph(self.cfg.graph)
        self.tracker = LaneTracker(self.cfg.lanes)
        self.width = LaneWidthTracker(self.cfg.ingest, self.cfg.graph.width_sigma_smc,
                                      self.cfg.graph.width_sigma_default)
        self.base: Optional[BaseClothoid] = None
        self.frames = 0
        self.last: Optional[FrameResult] = None

    def process(self, frame) -> FrameResult:
        cfg = self.cfg
        g = self.graph
        motion = None
        if g.current_pose is None:
            g.add_pose(Pose2())
        else:
            motion = g.advance_odometry(frame.control)
        ego = g.current_pose
        counts = {"smc": 0, "hrc": 0, "objects": 0}

        if cfg.ingest.width_tracking:
            width = self.width.update(frame.smc, motion.x if motion is not None else 0.0)
        else:
            width = lane_width_estimate(frame.smc, cfg.ingest)
        if frame.smc is not None:
            left, right = sample_smc_features(frame.smc, cfg.ingest)
            ids = g.add_measurements("smc", left + right, ego)
            counts["smc"] = sum(v is not None for v in ids)
        if frame.hrc is not None:
            ids = g.add_measurements("hrc", ingest_hrc_features(frame.hrc).features, ego)
            counts["hrc"] = sum(v is not None for v in ids)
        for o in eligible_objects(frame.objects):
            pair = object_to_features(o, width.width, cfg.ingest)
            if pair is None:
                continue
            g.add_object_measurement(o.id, pair[0], pair[1], width.width, ego, width.from_smc, width.sigma)
            counts["objects"] += 1

        report = solve(g, cfg.solver)
        fused = extract_fused_features(g, covariance=cfg.fused_covariance)
        fused = [f for f in fused if f.pose.x >= cfg.lanes.feature_min_x]
        counts["fused"] = len(fused)

        try:
            base = fit_base_clothoid(fused, cfg.lanes)
        except NoFitError:
            base = self.base.moved(motion) if (self.base is not None and motion is not None) else self.base
        self.base = base

        dt = frame.control.dt if self.frames > 0 else 0.0
        self.tracker.predict(dt, motion)
        offsets = []
        if base is not None and fused:
            grouping = group_features(fused, base, self.tracker.lanes, width.width, cfg.lanes)
            offsets = fit_lane_offsets(grouping, fused, base, cfg.lanes)
        self.tracker.correct(base, offsets)
        self.frames += 1
        lanes = sorted(self.tracker.lanes, key=lambda l: -l.y0)
        self.last = FrameResult(frame.index, frame.timestamp, [l.clothoid(cfg.lanes.horizon) for l in lanes],
                                [l.id for l in lanes], base, report, counts)
        return self.last
