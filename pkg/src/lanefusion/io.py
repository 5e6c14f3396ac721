"""Scenario files, frame logs and ground-truth files.

Scenarios are YAML documents mirroring :class:`ScenarioConfig`.  Frame logs
are JSON Lines: a header record followed by one record per sensor frame.
Ground truth travels in a ``.npz`` file next to the log.
"""
from __future__ import annotations

import dataclasses
import json
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
import yaml

from .geometry import Clothoid, ControlVector, LaneFeature, Pose2
from .ingest import HrcFeatureReport, SmcLaneReport, TrackedObject
from .simulator import (
    Dropout,
    GroundTruthMap,
    LaneChange,
    ObjectSpec,
    RoadSegment,
    ScenarioConfig,
    ScenarioError,
    SensorFrame,
    TrafficConfig,
)

LOG_FORMAT = "lanefusion-frames"
LOG_VERSION = 1

# element types of list-valued scenario fields
_LIST_ITEMS = {
    (ScenarioConfig, "road"): RoadSegment,
    (ScenarioConfig, "dropouts"): Dropout,
    (TrafficConfig, "objects"): ObjectSpec,
    (TrafficConfig, "lane_changes"): LaneChange,
}


class LogSchemaError(ValueError):
    """A frame log record does not match the schema."""

    def __init__(self, record: int, message: str):
        super().__init__(f"record {record}: {message}")
        self.record = record


# ---------------------------------------------------------------- scenarios
def _convert(value, default, path: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ScenarioError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
            raise ScenarioError(f"{path}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ScenarioError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ScenarioError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            raise ScenarioError(f"{path}: expected a list of {len(default)} numbers")
        return tuple(_convert(v, d, f"{path}[{i}]") for i, (v, d) in enumerate(zip(value, default)))
    return value


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ScenarioError(f"{path or 'scenario'}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ScenarioError(f"{path or 'scenario'}: unknown key(s) {', '.join(map(str, unknown))}")
    kwargs = {}
    for name, f in fields.items():
        key = f"{path}.{name}" if path else name
        has_default = f.default is not dataclasses.MISSING or f.default_factory is not dataclasses.MISSING
        if name not in data:
            if not has_default:
                raise ScenarioError(f"{key}: required")
            continue
        value = data[name]
        default = f.default if f.default is not dataclasses.MISSING else (
            f.default_factory() if f.default_factory is not dataclasses.MISSING else None)
        item = _LIST_ITEMS.get((cls, name))
        if item is not None:
            if not isinstance(value, list):
                raise ScenarioError(f"{key}: expected a list")
            kwargs[name] = [_build(item, v, f"{key}[{i}]") for i, v in enumerate(value)]
        elif dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, key)
        elif default is None:
            kwargs[name] = _required_scalar(cls, name, value, key)
        else:
            kwargs[name] = _convert(value, default, key)
    return cls(**kwargs)


def _required_scalar(cls, name: str, value, key: str):
    # fields without a default are numeric; the annotation tells int from float
    ann = str(cls.__annotations__.get(name, "float"))
    if ann == "int":
        return _convert(value, 0, key)
    return _convert(value, 0.0, key)


def scenario_from_dict(data: dict) -> ScenarioConfig:
    cfg = _build(ScenarioConfig, data or {}, "")
    cfg.validate()
    return cfg


def scenario_to_dict(cfg: ScenarioConfig) -> dict:
    def plain(v):
        if dataclasses.is_dataclass(v):
            return {f.name: plain(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, (list, tuple)):
            return [plain(x) for x in v]
        return v
    return plain(cfg)


def load_scenario(path) -> ScenarioConfig:
    """Read and validate a scenario YAML file.

    Raises :class:`FileNotFoundError` for a missing file and
    :class:`ScenarioError` for malformed or invalid content.
    """
    p = Path(path)
    try:
        text = p.read_text()
    except FileNotFoundError:
        raise FileNotFoundError(f"scenario file not found: {p}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ScenarioError(f"{p}: not valid YAML ({exc})") from exc
    return scenario_from_dict(data)


def save_scenario(cfg: ScenarioConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(scenario_to_dict(cfg), sort_keys=False))


def bundled_scenarios() -> list:
    root = resources.files("lanefusion") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def bundled_scenario_path(name: str) -> Path:
    root = resources.files("lanefusion") / "scenarios"
    p = root / f"{name}.yaml"
    if not p.is_file():
        raise FileNotFoundError(f"no bundled scenario named {name!r} (have: {', '.join(bundled_scenarios())})")
    return Path(str(p))


def load_bundled(name: str) -> ScenarioConfig:
    return load_scenario(bundled_scenario_path(name))


# --------------------------------------------------------------- frame logs
def _clothoid(c):
    if c is None:
        return None
    return {"y0": c.y0, "theta0": c.theta0, "c0": c.c0, "c1": c.c1, "x_min": c.x_min, "x_max": c.x_max}


def frame_to_record(f: SensorFrame) -> dict:
    rec = {
        "index": int(f.index),
        "timestamp": float(f.timestamp),
        "control": {"yaw_rate": f.control.yaw_rate, "speed": f.control.speed, "dt": f.control.dt},
        "smc": None,
        "hrc": None,
        "objects": [],
    }
    if f.smc is not None:
        rec["smc"] = {
            "left": _clothoid(f.smc.left),
            "right": _clothoid(f.smc.right),
            "detection_range": f.smc.detection_range,
            "sigmas": list(f.smc.sigmas),
            "confidence": f.smc.confidence,
        }
    if f.hrc is not None:
        rec["hrc"] = {
            "max_range": f.hrc.max_range,
            "features": [[q.pose.x, q.pose.y, q.pose.theta, q.confidence] + q.covariance.ravel().tolist()
                         for q in f.hrc.features],
        }
    for o in f.objects:
        rec["objects"].append({
            "id": int(o.id),
            "pose": [float(o.pose.x), float(o.pose.y), float(o.pose.theta)],
            "velocity": float(o.velocity),
            "covariance": o.covariance.ravel().tolist(),
            "confirmed": bool(o.confirmed),
        })
    return rec


def _num(rec: dict, key: str, k: int) -> float:
    if key not in rec:
        raise LogSchemaError(k, f"missing field {key!r}")
    v = rec[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise LogSchemaError(k, f"field {key!r} must be a number")
    return float(v)


def _section(rec: dict, key: str, k: int, kind=dict):
    if key not in rec:
        raise LogSchemaError(k, f"missing field {key!r}")
    v = rec[key]
    if v is not None and not isinstance(v, kind):
        raise LogSchemaError(k, f"field {key!r} has the wrong type")
    return v


def record_to_frame(rec, k: int) -> SensorFrame:
    """Rebuild a :class:`SensorFrame`; ``k`` is the record index used in errors."""
    if not isinstance(rec, dict):
        raise LogSchemaError(k, "record is not an object")
    try:
        index = rec.get("index")
        if isinstance(index, bool) or not isinstance(index, int):
            raise LogSchemaError(k, "field 'index' must be an integer")
        ctl = _section(rec, "control", k)
        if ctl is None:
            raise LogSchemaError(k, "field 'control' is required")
        control = ControlVector(_num(ctl, "yaw_rate", k), _num(ctl, "speed", k), _num(ctl, "dt", k))
        smc = None
        s = _section(rec, "smc", k)
        if s is not None:
            sides = []
            for side in ("left", "right"):
                c = _section(s, side, k)
                sides.append(None if c is None else Clothoid(*(_num(c, n, k) for n in
                                                               ("y0", "theta0", "c0", "c1", "x_min", "x_max"))))
            sig = _section(s, "sigmas", k, list)
            smc = SmcLaneReport(sides[0], sides[1], _num(s, "detection_range", k),
                                tuple(float(x) for x in sig), _num(s, "confidence", k))
        hrc = None
        h = _section(rec, "hrc", k)
        if h is not None:
            feats = []
            for row in _section(h, "features", k, list) or []:
                if not isinstance(row, list) or len(row) != 13:
                    raise LogSchemaError(k, "HRC feature rows need 13 numbers")
                feats.append(LaneFeature(Pose2(row[0], row[1], row[2]), float(row[3]),
                                         np.array(row[4:], dtype=float).reshape(3, 3)))
            hrc = HrcFeatureReport(tuple(feats), _num(h, "max_range", k))
        objects = []
        for o in _section(rec, "objects", k, list) or []:
            pose = o.get("pose")
            cov = o.get("covariance")
            if not isinstance(pose, list) or len(pose) != 3 or not isinstance(cov, list) or len(cov) != 9:
                raise LogSchemaError(k, "object needs a 3-element pose and a 9-element covariance")
            objects.append(TrackedObject(int(o["id"]), Pose2(*pose), _num(o, "velocity", k),
                                         np.array(cov, dtype=float).reshape(3, 3), bool(o.get("confirmed", True))))
        return SensorFrame(index, _num(rec, "timestamp", k), control, smc, hrc, objects)
    except LogSchemaError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise LogSchemaError(k, str(exc)) from exc


def write_frame_log(path, frames: Iterable[SensorFrame], scenario: str = "") -> None:
    with Path(path).open("w") as fh:
        fh.write(json.dumps({"format": LOG_FORMAT, "version": LOG_VERSION, "scenario": scenario}) + "\n")
        for f in frames:
            fh.write(json.dumps(frame_to_record(f)) + "\n")


def iter_frame_log(path) -> Iterator[SensorFrame]:
    """Frames of a log, validated one record at a time.

    Record 0 is the header; frame records are numbered from 1 in errors.
    """
    p = Path(path)
    try:
        fh = p.open()
    except FileNotFoundError:
        raise FileNotFoundError(f"frame log not found: {p}") from None
    with fh:
        for k, line in enumerate(fh):
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise LogSchemaError(k, f"not valid JSON ({exc.msg})") from exc
            if k == 0:
                if not isinstance(rec, dict) or rec.get("format") != LOG_FORMAT:
                    raise LogSchemaError(0, f"missing {LOG_FORMAT!r} header")
                if rec.get("version") != LOG_VERSION:
                    raise LogSchemaError(0, f"unsupported log version {rec.get('version')!r}")
                continue
            yield record_to_frame(rec, k)


def read_frame_log(path) -> list:
    return list(iter_frame_log(path))


def truth_path_for(log_path) -> Path:
    p = Path(log_path)
    return p.with_name(p.name.split(".")[0] + ".truth.npz")


def save_truth(path, truth: GroundTruthMap) -> None:
    arrays = {f"boundary_{i}": b for i, b in enumerate(truth.boundaries)}
    np.savez_compressed(path, ego_poses=truth.ego_poses, timestamps=truth.timestamps,
                        lane_width=np.array(truth.lane_width),
                        arc_length=truth.arc_length if truth.arc_length is not None else np.zeros(0),
                        ego_arc=truth.ego_arc if truth.ego_arc is not None else np.zeros(0),
                        **arrays)


def load_truth(path) -> GroundTruthMap:
    with np.load(path) as z:
        n = sum(1 for k in z.files if k.startswith("boundary_"))
        arc = z["arc_length"]
        ego_arc = z["ego_arc"]
        return GroundTruthMap([z[f"boundary_{i}"] for i in range(n)], z["ego_poses"], z["timestamps"],
                              float(z["lane_width"]), arc if len(arc) else None, ego_arc if len(ego_arc) else None)
