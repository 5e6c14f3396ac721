"""Sliding-window fusion graph over ego poses and lane features.

All vertex poses are kept in the current vehicle frame; every odometry
step re-expresses the whole graph in the new frame, prunes what fell
behind the vehicle and links the new pose to its predecessor.

Storage is columnar (numpy arrays with an ``alive`` mask) because the
solver works on all edges at once; vertex ids are slot indices and are
never reused.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Optional

import numpy as np
from scipy.spatial import cKDTree

from .config import GraphConfig
from .geometry import (
    ControlVector,
    LaneFeature,
    Pose2,
    between_arrays,
    compose_arrays,
    ctrv_motion,
    information_batch,
    InvalidCovarianceError,
    wrap_angles,
)


class EdgeKind(enum.IntEnum):
    ODOMETRY = 0
    SMC = 1
    HRC = 2
    OBJ = 3
    WIDTH = 4
    SMOOTHING = 5


class VertexKind(enum.IntEnum):
    EGO_POSE = 0
    FEATURE = 1


MEASUREMENT_KINDS = (EdgeKind.SMC, EdgeKind.HRC, EdgeKind.OBJ)
SOURCE_BITS = {EdgeKind.SMC: 1, EdgeKind.HRC: 2, EdgeKind.OBJ: 4}


class Edge(NamedTuple):
    id: int
    kind: EdgeKind
    i: int
    j: int
    measurement: Pose2
    information: np.ndarray
    switch_id: Optional[int]


class SwitchVariable(NamedTuple):
    id: int
    value: float
    prior_information: float
    object_id: int
    side: str
    step: int


@dataclass
class RetiredSwitch:
    """A switch variable whose smoothing edge left the graph, with its last value."""

    id: int
    object_id: int
    side: str
    step: int
    value: float
    initial_chi2: float


class _Columns:
    """Growable set of equally long numpy columns."""

    def __init__(self, spec: dict, capacity: int = 256):
        self._spec = spec
        self.n = 0
        self.cap = capacity
        for name, (shape, dtype, fill) in spec.items():
            setattr(self, name, np.full((capacity,) + shape, fill, dtype=dtype))

    def append(self) -> int:
        if self.n == self.cap:
            self._resize(self.cap * 2)
        self.n += 1
        return self.n - 1

    def extend(self, k: int) -> np.ndarray:
        """Append ``k`` rows; returns their indices."""
        need = self.n + k
        if need > self.cap:
            cap = self.cap
            while cap < need:
                cap *= 2
            self._resize(cap)
        rows = np.arange(self.n, need)
        self.n = need
        return rows

    def _resize(self, cap: int) -> None:
        for name, (shape, dtype, fill) in self._spec.items():
            old = getattr(self, name)
            new = np.full((cap,) + shape, fill, dtype=dtype)
            new[: self.n] = old[: self.n]
            setattr(self, name, new)
        self.cap = cap

    def keep(self, rows: np.ndarray) -> None:
        """Compact to the given rows (in order)."""
        k = len(rows)
        for name in self._spec:
            col = getattr(self, name)
            col[:k] = col[rows]
        self.n = k


_VERTEX_SPEC = {
    "pose": ((3,), float, 0.0),
    "kind": ((), np.int8, 0),
    "alive": ((), bool, False),
    "conf": ((), float, 0.0),
    "info": ((3, 3), float, 0.0),
    "src": ((), np.uint8, 0),
    "nmeas": ((), np.int32, 0),
}
_EDGE_SPEC = {
    "id": ((), np.int64, -1),
    "kind": ((), np.int8, 0),
    "i": ((), np.int64, -1),
    "j": ((), np.int64, -1),
    "z": ((3,), float, 0.0),
    "info": ((3, 3), float, 0.0),
    "switch": ((), np.int64, -1),
    "alive": ((), bool, False),
}
_SWITCH_SPEC = {
    "value": ((), float, 1.0),
    "prior": ((), float, 1.0),
    "alive": ((), bool, False),
    "obj": ((), np.int64, -1),
    "side": ((), np.int8, 0),
    "step": ((), np.int64, -1),
    "chi2": ((), float, 0.0),
}


def odometry_information(delta: np.ndarray, cfg: GraphConfig) -> np.ndarray:
    dist = math.hypot(delta[0], delta[1])
    s_xy = cfg.odo_sigma_xy_rel * dist + cfg.odo_sigma_xy_abs
    s_th = cfg.odo_sigma_theta_rel * abs(delta[2]) + cfg.odo_sigma_theta_abs
    return np.diag([1.0 / s_xy**2, 1.0 / s_xy**2, 1.0 / s_th**2])


def _compose_jacobians(a: np.ndarray, b: np.ndarray):
    c, s = math.cos(a[2]), math.sin(a[2])
    ja = np.array([[1.0, 0.0, -s * b[0] - c * b[1]], [0.0, 1.0, c * b[0] - s * b[1]], [0.0, 0.0, 1.0]])
    jb = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return ja, jb


class FusionGraph:
    """Vertices, typed constraint edges and switch variables of one fusion window."""

    def __init__(self, cfg: GraphConfig | None = None):
        self.cfg = cfg or GraphConfig()
        self.v = _Columns(_VERTEX_SPEC)
        self.e = _Columns(_EDGE_SPEC, 1024)
        self.s = _Columns(_SWITCH_SPEC)
        self.poses: list[int] = []          # alive ego-pose ids, oldest first
        self.step = 0
        self._next_edge_id = 0
        self._objects: dict[int, tuple[int, int, int]] = {}  # id -> (step, left, right)
        self.retired: list[RetiredSwitch] = []
        self.diagnostics = {"rejected_measurements": 0, "associated": 0, "inserted": 0}

    # ------------------------------------------------------------------ queries
    @property
    def current_pose(self) -> Optional[int]:
        return self.poses[-1] if self.poses else None

    def vertex_pose(self, vid: int) -> Pose2:
        self._check_vertex(vid)
        return Pose2.from_array(self.v.pose[vid])

    def vertex_kind(self, vid: int) -> VertexKind:
        self._check_vertex(vid)
        return VertexKind(int(self.v.kind[vid]))

    def vertex_confidence(self, vid: int) -> float:
        return float(self.v.conf[vid])

    def vertex_sources(self, vid: int) -> set:
        bits = int(self.v.src[vid])
        return {k for k, b in SOURCE_BITS.items() if bits & b}

    def _check_vertex(self, vid: int) -> None:
        if not (0 <= vid < self.v.n and self.v.alive[vid]):
            raise KeyError(f"no vertex {vid}")

    def feature_ids(self) -> np.ndarray:
        n = self.v.n
        return np.nonzero(self.v.alive[:n] & (self.v.kind[:n] == VertexKind.FEATURE))[0]

    def vertex_ids(self) -> np.ndarray:
        return np.nonzero(self.v.alive[: self.v.n])[0]

    def _edge_rows(self, kind=None) -> np.ndarray:
        m = self.e.alive[: self.e.n].copy()
        if kind is not None:
            m &= self.e.kind[: self.e.n] == int(kind)
        return np.nonzero(m)[0]

    def _edge_at(self, r: int) -> Edge:
        sw = int(self.e.switch[r])
        return Edge(
            int(self.e.id[r]), EdgeKind(int(self.e.kind[r])), int(self.e.i[r]), int(self.e.j[r]),
            Pose2.from_array(self.e.z[r]), self.e.info[r].copy(), sw if sw >= 0 else None,
        )

    def edges(self, kind=None) -> Iterator[Edge]:
        for r in self._edge_rows(kind):
            yield self._edge_at(int(r))

    def edge_count(self, kind=None) -> int:
        return len(self._edge_rows(kind))

    def switches(self) -> list[SwitchVariable]:
        ids = np.nonzero(self.s.alive[: self.s.n])[0]
        sides = ("left", "right")
        return [
            SwitchVariable(int(k), float(self.s.value[k]), float(self.s.prior[k]),
                           int(self.s.obj[k]), sides[int(self.s.side[k])], int(self.s.step[k]))
            for k in ids
        ]

    def switch_value(self, sid: int) -> float:
        return float(self.s.value[sid])

    def __len__(self) -> int:
        return len(self.vertex_ids())

    # ----------------------------------------------------------- construction
    def add_pose(self, pose: Pose2 = Pose2()) -> int:
        vid = self._new_vertex(pose.as_array(), VertexKind.EGO_POSE, 0.0, np.zeros((3, 3)))
        self.poses.append(vid)
        return vid

    def _new_vertex(self, pose: np.ndarray, kind: VertexKind, conf: float, info: np.ndarray) -> int:
        vid = self.v.append()
        self.v.pose[vid] = pose
        self.v.kind[vid] = kind
        self.v.alive[vid] = True
        self.v.conf[vid] = conf
        self.v.info[vid] = info
        self.v.src[vid] = 0
        self.v.nmeas[vid] = 0
        return vid

    def add_edge(self, kind: EdgeKind, i: int, j: int, z, information: np.ndarray,
                 switch_id: Optional[int] = None) -> int:
        """Insert a raw edge; returns its id. Used by the typed builders and by tests."""
        information = np.asarray(information, dtype=float)
        if not np.allclose(information, information.T, atol=1e-9 * max(1.0, np.abs(information).max())):
            raise ValueError("information matrix must be symmetric")
        if np.linalg.eigvalsh(0.5 * (information + information.T))[0] < -1e-9 * max(1.0, np.abs(information).max()):
            raise ValueError("information matrix must be positive semi-definite")
        if (kind == EdgeKind.SMOOTHING) != (switch_id is not None):
            raise ValueError("smoothing edges, and only they, carry a switch variable")
        if kind == EdgeKind.SMOOTHING and information[0, 0] != 0.0:
            raise ValueError("smoothing edges must not constrain the longitudinal distance")
        r = self.e.append()
        eid = self._next_edge_id
        self._next_edge_id += 1
        self.e.id[r] = eid
        self.e.kind[r] = kind
        self.e.i[r] = i
        self.e.j[r] = j
        self.e.z[r] = z.as_array() if isinstance(z, Pose2) else np.asarray(z, dtype=float)
        self.e.info[r] = 0.5 * (information + information.T)
        self.e.switch[r] = -1 if switch_id is None else switch_id
        self.e.alive[r] = True
        if kind in MEASUREMENT_KINDS:
            self.v.nmeas[i] += 1
            self.v.nmeas[j] += 1
            self.v.src[j] |= SOURCE_BITS[kind]
        return eid

    def add_switch(self, prior: float, object_id: int = -1, side: str = "left", value: float = 1.0) -> int:
        k = self.s.append()
        self.s.value[k] = value
        self.s.prior[k] = prior
        self.s.alive[k] = True
        self.s.obj[k] = object_id
        self.s.side[k] = 0 if side == "left" else 1
        self.s.step[k] = self.step
        self.s.chi2[k] = 0.0
        return k

    def add_feature(self, pose: Pose2, confidence: float = 1.0, information: np.ndarray | None = None) -> int:
        """Insert a bare feature vertex (graph surgery and tests)."""
        info = np.eye(3) if information is None else np.asarray(information, dtype=float)
        return self._new_vertex(pose.as_array(), VertexKind.FEATURE, confidence, info)

    # -------------------------------------------------------------- odometry
    def advance_odometry(self, u: ControlVector) -> Pose2:
        """Move the graph into the frame of the new ego pose; returns the motion increment."""
        delta = ctrv_motion(u)
        d = delta.as_array()
        if self.poses:
            self._transform(d)
        self.step += 1
        self._prune_behind()
        self._remove_orphan_poses()
        prev = self.current_pose
        cur = self.add_pose(Pose2())
        if prev is not None:
            self.add_edge(EdgeKind.ODOMETRY, prev, cur, d, odometry_information(d, self.cfg))
        self._enforce_window()
        return delta

    def _transform(self, d: np.ndarray) -> None:
        n = self.v.n
        alive = self.v.alive[:n]
        idx = np.nonzero(alive)[0]
        self.v.pose[idx] = between_arrays(d, self.v.pose[idx])
        c, s = math.cos(-d[2]), math.sin(-d[2])
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        self.v.info[idx] = np.einsum("ab,nbc,dc->nad", rot, self.v.info[idx], rot)

    def _prune_behind(self) -> None:
        n = self.v.n
        dead = self.v.alive[:n] & (self.v.kind[:n] == VertexKind.FEATURE) & (self.v.pose[:n, 0] < -self.cfg.prune_behind)
        if dead.any():
            self._kill_vertices(dead)

    def _kill_vertices(self, dead: np.ndarray) -> None:
        """Remove vertices (bool mask over slots), their edges, and any feature left without measurements."""
        while dead.any():
            self.v.alive[: len(dead)][dead] = False
            ne = self.e.n
            ei, ej = self.e.i[:ne], self.e.j[:ne]
            vd = np.zeros(self.v.n, dtype=bool)
            vd[: len(dead)] = dead
            hit = self.e.alive[:ne] & (vd[ei] | ((ej >= 0) & vd[np.maximum(ej, 0)]))
            self._retire_edges(np.nonzero(hit)[0])
            self.poses = [p for p in self.poses if self.v.alive[p]]
            # features that lost every measurement are no longer anchored
            n = self.v.n
            dead = self.v.alive[:n] & (self.v.kind[:n] == VertexKind.FEATURE) & (self.v.nmeas[:n] <= 0)

    def _retire_edges(self, rows: np.ndarray) -> None:
        if len(rows) == 0:
            return
        self.e.alive[rows] = False
        kinds = self.e.kind[rows]
        meas = np.isin(kinds, [int(k) for k in MEASUREMENT_KINDS])
        np.subtract.at(self.v.nmeas, self.e.i[rows[meas]], 1)
        np.subtract.at(self.v.nmeas, self.e.j[rows[meas]], 1)
        sides = ("left", "right")
        for r in rows[kinds == EdgeKind.SMOOTHING]:
            k = int(self.e.switch[r])
            if self.s.alive[k]:
                self.s.alive[k] = False
                self.retired.append(RetiredSwitch(k, int(self.s.obj[k]), sides[int(self.s.side[k])],
                                                  int(self.s.step[k]), float(self.s.value[k]),
                                                  float(self.s.chi2[k])))
        if self.e.n > 2048 and self.e.alive[: self.e.n].sum() < self.e.n // 2:
            self.e.keep(np.nonzero(self.e.alive[: self.e.n])[0])

    def _odometry_rows_at(self, vid: int) -> tuple[Optional[int], Optional[int]]:
        rows = self._edge_rows(EdgeKind.ODOMETRY)
        into = rows[self.e.j[rows] == vid]
        out = rows[self.e.i[rows] == vid]
        return (int(into[0]) if len(into) else None), (int(out[0]) if len(out) else None)

    def _remove_orphan_poses(self) -> None:
        cur = self.current_pose
        for p in list(self.poses):
            if p == cur or self.v.nmeas[p] > 0:
                continue
            r_in, r_out = self._odometry_rows_at(p)
            if r_in is not None and r_out is not None:
                # keep the chain intact: replace the two increments by their composition
                z1, z2 = self.e.z[r_in].copy(), self.e.z[r_out].copy()
                j1, j2 = _compose_jacobians(z1, z2)
                cov = j1 @ np.linalg.inv(self.e.info[r_in]) @ j1.T + j2 @ np.linalg.inv(self.e.info[r_out]) @ j2.T
                a, b = int(self.e.i[r_in]), int(self.e.j[r_out])
                z = compose_arrays(z1, z2)[0]
                self._retire_edges(np.array([r_in, r_out]))
                self.add_edge(EdgeKind.ODOMETRY, a, b, z, np.linalg.inv(cov))
            mask = np.zeros(self.v.n, dtype=bool)
            mask[p] = True
            self._kill_vertices(mask)

    def _enforce_window(self) -> None:
        while len(self.poses) > self.cfg.window + 1:
            mask = np.zeros(self.v.n, dtype=bool)
            mask[self.poses[0]] = True
            self._kill_vertices(mask)
        self._remove_orphan_poses_tail()

    def _remove_orphan_poses_tail(self) -> None:
        cur = self.current_pose
        while len(self.poses) > 1 and self.poses[0] != cur and self.v.nmeas[self.poses[0]] <= 0:
            mask = np.zeros(self.v.n, dtype=bool)
            mask[self.poses[0]] = True
            self._kill_vertices(mask)

    # ----------------------------------------------------------- association
    def associate(self, f: LaneFeature, ego: Optional[int] = None) -> Optional[int]:
        """Nearest feature vertex passing the Euclidean, heading and chi-square gates."""
        ego = self.current_pose if ego is None else ego
        p, cov, _ = self._to_graph_frame(f.pose.as_array()[None, :], f.covariance[None], None, ego)
        vid = self._associate_batch(p, cov)[0]
        return None if vid < 0 else int(vid)

    def _to_graph_frame(self, p: np.ndarray, cov: np.ndarray, info: Optional[np.ndarray], ego: Optional[int]):
        """Express ego-frame measurements in the graph frame (that of the current pose)."""
        if ego is None:
            return p, cov, info
        ep = self.v.pose[ego]
        if not np.any(ep != 0.0):
            return p, cov, info
        c, s = math.cos(ep[2]), math.sin(ep[2])
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        p = compose_arrays(ep, p)
        cov = np.einsum("ab,nbc,dc->nad", rot, cov, rot)
        if info is not None:
            info = np.einsum("ab,nbc,dc->nad", rot, info, rot)
        return p, cov, info

    def _gate(self, p: np.ndarray, cov: np.ndarray, fi: np.ndarray, cand: np.ndarray):
        """Squared Mahalanobis distance of (feature fi, vertex cand) pairs; inf where a gate fails."""
        cfg = self.cfg
        d2 = np.full(len(fi), np.inf)
        if len(fi) == 0:
            return d2
        diff = p[fi] - self.v.pose[cand]
        diff[:, 2] = wrap_angles(diff[:, 2])
        ok = (np.hypot(diff[:, 0], diff[:, 1]) < cfg.assoc_max_distance) & \
             (np.abs(diff[:, 2]) < math.radians(cfg.assoc_max_heading))
        if not ok.any():
            return d2
        vinfo = self.v.info[cand[ok]]
        good = np.linalg.det(vinfo) > 0.0
        vcov = np.zeros_like(vinfo)
        vcov[good] = np.linalg.inv(vinfo[good])
        comb = cov[fi[ok]] + vcov
        good &= np.linalg.det(comb) > 0.0
        idx = np.nonzero(ok)[0][good]
        if len(idx):
            sol = np.linalg.solve(comb[good], diff[idx][:, :, None])[:, :, 0]
            d2[idx] = np.einsum("na,na->n", diff[idx], sol)
        d2[d2 >= cfg.assoc_chi2] = np.inf
        return d2

    def _associate_batch(self, p: np.ndarray, cov: np.ndarray, sources: int = 0) -> np.ndarray:
        """Best existing vertex per row (-1 if none); ties go to the lower vertex id.

        A non-zero ``sources`` bit mask restricts candidates to vertices fed
        by one of those sources.
        """
        out = np.full(len(p), -1, dtype=np.int64)
        ids = self.feature_ids()
        if sources:
            ids = ids[(self.v.src[ids] & sources) != 0]
        if len(ids) == 0 or len(p) == 0:
            return out
        tree = cKDTree(self.v.pose[ids, :2])
        lists = tree.query_ball_point(p[:, :2], self.cfg.assoc_max_distance)
        counts = np.array([len(l) for l in lists], dtype=np.int64)
        if counts.sum() == 0:
            return out
        fi = np.repeat(np.arange(len(p)), counts)
        cand = ids[np.concatenate([np.asarray(l, dtype=np.int64) for l in lists])]
        d2 = self._gate(p, cov, fi, cand)
        hit = np.isfinite(d2)
        fi, cand, d2 = fi[hit], cand[hit], d2[hit]
        order = np.lexsort((cand, d2, fi))
        fi, cand = fi[order], cand[order]
        first = np.r_[True, fi[1:] != fi[:-1]] if len(fi) else np.zeros(0, dtype=bool)
        out[fi[first]] = cand[first]
        return out

    def add_measurement(self, source: str | EdgeKind, f: LaneFeature, ego: Optional[int] = None) -> Optional[int]:
        """Associate-or-insert a camera feature and tie it to the ego pose.

        Returns the feature vertex id, or ``None`` when the covariance cannot
        be inverted (counted in ``diagnostics['rejected_measurements']``).
        """
        return self.add_measurements(source, [f], ego)[0]

    def add_measurements(self, source: str | EdgeKind, features, ego: Optional[int] = None) -> list:
        """Batch form of :meth:`add_measurement`.

        Features are first associated against the vertices that existed
        before the call; the remaining ones are then processed in order,
        each either joining a vertex created earlier in the same batch or
        becoming a new vertex.
        """
        kind = EdgeKind[source.upper()] if isinstance(source, str) else EdgeKind(source)
        if kind not in (EdgeKind.SMC, EdgeKind.HRC):
            raise ValueError(f"camera measurement source must be smc or hrc, got {source!r}")
        return self._measure(kind, features, ego)

    def _measure(self, kind: EdgeKind, features, ego: Optional[int], sources: int = 0) -> list:
        ego = self.current_pose if ego is None else ego
        if ego is None:
            raise RuntimeError("graph has no ego pose; call add_pose or advance_odometry first")
        n = len(features)
        if n == 0:
            return []
        z = np.array([(f.pose.x, f.pose.y, f.pose.theta) for f in features])
        cov = np.array([f.covariance for f in features])
        conf = np.array([f.confidence for f in features], dtype=float)
        info, ok = information_batch(cov)
        self.diagnostics["rejected_measurements"] += int((~ok).sum())
        result: list = [None] * n
        k = np.nonzero(ok)[0]
        if len(k) == 0:
            return result
        z, cov, info, conf = z[k], cov[k], info[k], conf[k]
        wp, wcov, winfo = self._to_graph_frame(z, cov, info, ego)
        vids = self._associate_batch(wp, wcov, sources)
        assoc = vids >= 0
        # the rest, in order, against vertices born in this batch
        born: list[int] = []
        for q in np.nonzero(~assoc)[0]:
            if born:
                cand = np.array(born, dtype=np.int64)
                d2 = self._gate(wp, wcov, np.full(len(cand), q), cand)
                best = int(np.argmin(d2))
                if np.isfinite(d2[best]):
                    vids[q] = cand[best]
                    self._fuse(cand[best:best + 1], conf[q:q + 1], winfo[q:q + 1])
                    self.diagnostics["associated"] += 1
                    continue
            vids[q] = self._new_vertex(wp[q], VertexKind.FEATURE, conf[q], winfo[q])
            born.append(int(vids[q]))
            self.diagnostics["inserted"] += 1
        if assoc.any():
            self._fuse(vids[assoc], conf[assoc], winfo[assoc])
            self.diagnostics["associated"] += int(assoc.sum())
        rows = self.e.extend(len(k))
        self.e.id[rows] = self._next_edge_id + np.arange(len(k))
        self._next_edge_id += len(k)
        self.e.kind[rows] = kind
        self.e.i[rows] = ego
        self.e.j[rows] = vids
        self.e.z[rows] = z
        self.e.info[rows] = info
        self.e.switch[rows] = -1
        self.e.alive[rows] = True
        self.v.nmeas[ego] += len(k)
        np.add.at(self.v.nmeas, vids, 1)
        np.bitwise_or.at(self.v.src, vids, SOURCE_BITS[kind])
        for q, vid in zip(k, vids):
            result[q] = int(vid)
        return result

    def _fuse(self, vids: np.ndarray, conf: np.ndarray, info: np.ndarray) -> None:
        """Fold associated measurements into vertex confidence and information."""
        if self.cfg.confidence_update:
            miss = 1.0 - self.v.conf
            np.multiply.at(miss, vids, 1.0 - conf)
            self.v.conf[vids] = np.minimum(1.0, 1.0 - miss[vids])
        np.add.at(self.v.info, vids, info)

    def add_object_measurement(self, obj_id: int, left: LaneFeature, right: LaneFeature, w: float,
                               ego: Optional[int] = None, width_from_smc: bool = False,
                               width_sigma: Optional[float] = None):
        """Object pseudo-features with width, smoothing and switch constraints.

        The width edge sigma is ``width_sigma`` when given, else the configured
        value for an SMC-derived or a default width.
        """
        cfg = self.cfg
        only = {"objects": SOURCE_BITS[EdgeKind.OBJ], "none": 8}.get(cfg.object_association, 0)
        lid = self._measure(EdgeKind.OBJ, [left], ego, only)[0]
        rid = self._measure(EdgeKind.OBJ, [right], ego, only)[0]
        if lid is None or rid is None:
            return lid, rid
        if lid != rid:
            s_w = width_sigma if width_sigma is not None else (
                cfg.width_sigma_smc if width_from_smc else cfg.width_sigma_default)
            info = np.diag([0.0, 1.0 / s_w**2, 1.0 / cfg.width_sigma_theta**2])
            # right feature seen from the left one sits at -w; stored as right -> left = +w
            self.add_edge(EdgeKind.WIDTH, rid, lid, np.array([0.0, w, 0.0]), info)
        prev = self._objects.get(obj_id)
        if prev is not None and prev[0] == self.step - 1:
            smo = np.diag([0.0, 1.0 / cfg.smoothing_sigma_y**2, 1.0 / cfg.smoothing_sigma_theta**2])
            for side, old, new in (("left", prev[1], lid), ("right", prev[2], rid)):
                if old == new or not self.v.alive[old]:
                    continue
                k = self.add_switch(cfg.switch_prior, obj_id, side)
                e = between_arrays(self.v.pose[old], self.v.pose[new])[0]
                self.s.chi2[k] = float(e @ smo @ e)
                self.add_edge(EdgeKind.SMOOTHING, old, new, np.zeros(3), smo, switch_id=k)
        self._objects[obj_id] = (self.step, lid, rid)
        return lid, rid

    def retire_all_switches(self) -> list[RetiredSwitch]:
        """Switch log including those still alive (with their current value)."""
        sides = ("left", "right")
        live = [
            RetiredSwitch(int(k), int(self.s.obj[k]), sides[int(self.s.side[k])], int(self.s.step[k]),
                          float(self.s.value[k]), float(self.s.chi2[k]))
            for k in np.nonzero(self.s.alive[: self.s.n])[0]
        ]
        return self.retired + live

    # -------------------------------------------------------------- solver io
    def snapshot(self):
        """Arrays describing the alive part of the graph, for the optimizer."""
        ne = self.e.n
        rows = np.nonzero(self.e.alive[:ne])[0]
        sw = np.nonzero(self.s.alive[: self.s.n])[0]
        return GraphArrays(
            vertex_ids=self.vertex_ids(),
            poses=self.v.pose[: self.v.n],
            kind=self.e.kind[rows].astype(np.int64),
            i=self.e.i[rows],
            j=self.e.j[rows],
            z=self.e.z[rows],
            info=self.e.info[rows],
            switch=self.e.switch[rows],
            switch_ids=sw,
            switch_values=self.s.value[: self.s.n],
            switch_priors=self.s.prior[: self.s.n],
            gauge=self.current_pose,
        )


class GraphArrays(NamedTuple):
    vertex_ids: np.ndarray
    poses: np.ndarray          # indexed by vertex id
    kind: np.ndarray
    i: np.ndarray
    j: np.ndarray
    z: np.ndarray
    info: np.ndarray
    switch: np.ndarray
    switch_ids: np.ndarray
    switch_values: np.ndarray  # indexed by switch id
    switch_priors: np.ndarray
    gauge: Optional[int]


def edge_residuals(poses: np.ndarray, kind: np.ndarray, i: np.ndarray, j: np.ndarray,
                   z: np.ndarray, switch: np.ndarray, switch_values: np.ndarray) -> np.ndarray:
    """e = z - between(v_i, v_j) per edge, smoothing residuals scaled by their switch."""
    e = z - between_arrays(poses[i], poses[j])
    e[:, 2] = wrap_angles(e[:, 2])
    smo = kind == EdgeKind.SMOOTHING
    if smo.any():
        e[smo] *= switch_values[switch[smo]][:, None]
    return e


def graph_objective(g: FusionGraph) -> float:
    a = g.snapshot()
    e = edge_residuals(a.poses, a.kind, a.i, a.j, a.z, a.switch, a.switch_values)
    total = float(np.einsum("na,nab,nb->", e, a.info, e))
    s = a.switch_values[a.switch_ids]
    total += float(np.sum(a.switch_priors[a.switch_ids] * (1.0 - s) ** 2))
    return total


def dump_graph(g: FusionGraph) -> str:
    """Line-oriented text dump: one vertex, edge or switch per line."""
    lines = [f"# lanefusion graph step={g.step}"]
    for vid in g.vertex_ids():
        x, y, t = g.v.pose[vid]
        kind = VertexKind(int(g.v.kind[vid])).name.lower()
        lines.append(f"VERTEX {vid} {kind} {x:.6f} {y:.6f} {t:.6f} {g.v.conf[vid]:.4f}")
    iu = np.triu_indices(3)
    for edge in g.edges():
        tri = " ".join(f"{v:.6g}" for v in edge.information[iu])
        z = edge.measurement
        j = edge.j if edge.j >= 0 else "-"
        sw = "-" if edge.switch_id is None else edge.switch_id
        lines.append(
            f"EDGE {edge.id} {edge.kind.name.lower()} {edge.i} {j} {z.x:.6f} {z.y:.6f} {z.theta:.6f} {tri} {sw}"
        )
    for s in g.switches():
        lines.append(f"SWITCH {s.id} {s.value:.6f} {s.prior_information:.6g} {s.object_id} {s.side} {s.step}")
    return "\n".join(lines) + "\n"
