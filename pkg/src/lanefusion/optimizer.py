"""Gauss-Newton solver for the fusion graph.

Variables are the poses of every vertex except the current ego pose (held
at the origin to fix the gauge) plus one scalar per switch variable.
Switch variables are kept inside [0, 1]: a switch sitting on a bound whose
step points outward is frozen for that iteration, the others are clipped.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .config import SolverConfig
from .geometry import LaneFeature, Pose2, between_arrays, wrap_angles
from .graph import Edge, EdgeKind, FusionGraph, GraphArrays, VertexKind

log = logging.getLogger(__name__)

DENSE_LIMIT = 300


class SingularSystemError(RuntimeError):
    def __init__(self, vertices):
        super().__init__(f"normal matrix is singular; under-constrained vertices: {sorted(vertices)}")
        self.vertices = list(vertices)


@dataclass
class SolveReport:
    iterations: int = 0
    initial_objective: float = 0.0
    final_objective: float = 0.0
    converged: bool = False
    update_norms: list = field(default_factory=list)
    underconstrained: list = field(default_factory=list)
    message: str = ""


def _kernel(poses_i: np.ndarray, poses_j: np.ndarray, z: np.ndarray):
    """Raw residual e = z - between(v_i, v_j) with its Jacobians A = de/dv_i, B = de/dv_j."""
    zhat = between_arrays(poses_i, poses_j)
    e = z - zhat
    e[:, 2] = wrap_angles(e[:, 2])
    c, s = np.cos(poses_i[:, 2]), np.sin(poses_i[:, 2])
    n = len(z)
    a = np.zeros((n, 3, 3))
    a[:, 0, 0] = c
    a[:, 0, 1] = s
    a[:, 0, 2] = -zhat[:, 1]
    a[:, 1, 0] = -s
    a[:, 1, 1] = c
    a[:, 1, 2] = zhat[:, 0]
    a[:, 2, 2] = 1.0
    b = np.zeros((n, 3, 3))
    b[:, 0, 0] = -c
    b[:, 0, 1] = -s
    b[:, 1, 0] = s
    b[:, 1, 1] = -c
    b[:, 2, 2] = -1.0
    return e, a, b


def linearize_edge(edge: Edge, states: Mapping[int, Pose2], switch_value: float = 1.0):
    """Residual and analytic Jacobians of one edge.

    Returns ``(residual, J_i, J_j, J_s)``; ``J_s`` is ``None`` except for
    smoothing edges, whose residual is the raw error scaled by the switch.
    """
    def arr(p):
        return p.as_array() if isinstance(p, Pose2) else np.asarray(p, dtype=float)

    pi = arr(states[edge.i])[None, :]
    pj = arr(states[edge.j])[None, :]
    e, a, b = _kernel(pi, pj, edge.measurement.as_array()[None, :])
    e, a, b = e[0], a[0], b[0]
    if edge.kind == EdgeKind.SMOOTHING:
        return switch_value * e, switch_value * a, switch_value * b, e
    return e, a, b, None


class _Problem:
    """Index bookkeeping and linearisation of a graph snapshot."""

    def __init__(self, arrays: GraphArrays):
        self.a = arrays
        free = arrays.vertex_ids
        if arrays.gauge is not None:
            free = free[free != arrays.gauge]
        self.free = free
        self.var_of = np.full(len(arrays.poses), -1, dtype=np.int64)
        self.var_of[free] = 3 * np.arange(len(free))
        self.sw = arrays.switch_ids
        self.sw_var = np.full(len(arrays.switch_values), -1, dtype=np.int64)
        self.sw_var[self.sw] = 3 * len(free) + np.arange(len(self.sw))
        self.nvar = 3 * len(free) + len(self.sw)
        self.smo = arrays.kind == EdgeKind.SMOOTHING
        # scalar variable index for each of the 7 Jacobian columns of every edge
        n = len(arrays.kind)
        idx = np.full((n, 7), -1, dtype=np.int64)
        vi = self.var_of[arrays.i]
        vj = self.var_of[arrays.j]
        for k in range(3):
            idx[:, k] = np.where(vi >= 0, vi + k, -1)
            idx[:, 3 + k] = np.where(vj >= 0, vj + k, -1)
        idx[self.smo, 6] = self.sw_var[arrays.switch[self.smo]]
        self.idx = idx
        # Variable groups for elimination: ego poses are kept to the end; features
        # tied only to poses have decoupled 3x3 diagonal blocks ("simple"); the rest
        # (object features, switches) form a sparse block of their own.
        odo = arrays.kind == EdgeKind.ODOMETRY
        meas = np.isin(arrays.kind, [EdgeKind.SMC, EdgeKind.HRC, EdgeKind.OBJ])
        coupled = np.isin(arrays.kind, [EdgeKind.WIDTH, EdgeKind.SMOOTHING])
        is_pose = np.zeros(len(arrays.poses), dtype=bool)
        is_pose[arrays.i[odo]] = is_pose[arrays.j[odo]] = True
        is_pose[arrays.i[meas]] = True
        is_coupled = np.zeros(len(arrays.poses), dtype=bool)
        is_coupled[arrays.i[coupled]] = is_coupled[arrays.j[coupled]] = True
        self.pose_var = np.zeros(self.nvar, dtype=bool)
        self.simple_var = np.zeros(self.nvar, dtype=bool)
        pv = free[is_pose[free]]
        sv = free[~is_pose[free] & ~is_coupled[free]]
        if len(pv):
            self.pose_var[(self.var_of[pv][:, None] + np.arange(3)).ravel()] = True
        if len(sv):
            self.simple_var[(self.var_of[sv][:, None] + np.arange(3)).ravel()] = True
        self.group = np.full(self.nvar, 2, dtype=np.int8)
        self.group[self.pose_var] = 0
        self.group[self.simple_var] = 1
        self.local = np.zeros(self.nvar, dtype=np.int64)
        for k in range(3):
            m = self.group == k
            self.local[m] = np.arange(int(m.sum()))
        self.sizes = tuple(int((self.group == k).sum()) for k in range(3))
        self._blocks = None

    def use_blocks(self) -> bool:
        return self.nvar > DENSE_LIMIT and 0 < self.sizes[0] < self.nvar

    def _block_plan(self):
        """Destination of every needed Jacobian-product entry in the grouped normal equations.

        Each edge has up to three column blocks (vertex i, vertex j, switch);
        a block pair lands in one group pair, so destinations are computed
        per edge and broadcast over the 3x3 (or smaller) entries.
        """
        idx = self.idx
        n = idx.shape[0]
        npv = self.sizes[0]
        blocks = [(off, w, idx[:, off]) for off, w in ((0, 3), (3, 3), (6, 1))]
        out = {k: ([], []) for k in ("pp", "ss", "sp", "op")}
        oo = ([], [], [])
        ar = np.arange(n)
        for ro, rw, rv in blocks:
            rg = np.where(rv >= 0, self.group[np.maximum(rv, 0)], -1)
            rl = self.local[np.maximum(rv, 0)]
            for co, cw, cv in blocks:
                cg = np.where(cv >= 0, self.group[np.maximum(cv, 0)], -1)
                cl = self.local[np.maximum(cv, 0)]
                da = np.arange(rw)[:, None]
                db = np.arange(cw)[None, :]
                for key, (gr, gc) in (("pp", (0, 0)), ("ss", (1, 1)), ("sp", (1, 0)), ("oo", (2, 2)), ("op", (2, 0))):
                    m = (rg == gr) & (cg == gc)
                    if not m.any():
                        continue
                    e = ar[m]
                    pos = (e[:, None, None] * 49 + (ro + da) * 7 + co + db).ravel()
                    shape = (len(e), rw, cw)
                    r = np.broadcast_to(rl[m][:, None, None] + da, shape).ravel()
                    c = np.broadcast_to(cl[m][:, None, None] + db, shape).ravel()
                    if key == "oo":
                        for lst, v in zip(oo, (pos, r, c)):
                            lst.append(v)
                        continue
                    if key == "ss":
                        if np.any(r // 3 != c // 3):
                            raise AssertionError("simple feature blocks are not decoupled")
                        d = (r // 3) * 9 + (r % 3) * 3 + c % 3
                    else:
                        d = r * npv + c
                    out[key][0].append(pos)
                    out[key][1].append(d)

        def cat(xs):
            return np.concatenate(xs) if xs else np.zeros(0, dtype=np.int64)

        plan = {k: (cat(p), cat(d)) for k, (p, d) in out.items()}
        plan["oo"] = tuple(cat(x) for x in oo)
        return plan

    def _jacobian_products(self, poses: np.ndarray, svals: np.ndarray):
        a = self.a
        n = len(a.kind)
        e, ja, jb = _kernel(poses[a.i], poses[a.j], a.z)
        jac = np.zeros((n, 3, 7))
        jac[:, :, 0:3] = ja
        jac[:, :, 3:6] = jb
        res = e
        if self.smo.any():
            s = svals[a.switch[self.smo]]
            jac[self.smo, :, 6] = e[self.smo]
            jac[self.smo, :, 0:6] *= s[:, None, None]
            res = e.copy()
            res[self.smo] *= s[:, None]
        wj = np.matmul(a.info, jac)                            # Omega J
        hl = np.matmul(jac.transpose(0, 2, 1), wj)             # J^T Omega J
        bl = np.matmul(wj.transpose(0, 2, 1), res[:, :, None])[:, :, 0]   # J^T Omega e
        bvalid = self.idx >= 0
        g = np.bincount(self.idx[bvalid], weights=bl[bvalid], minlength=self.nvar)
        # switch priors: r = 1 - s, dr/ds = -1
        sv = self.sw_var[self.sw]
        pri = a.switch_priors[self.sw]
        g[sv] += -pri * (1.0 - svals[self.sw])
        return hl, g, sv, pri

    def linearize(self, poses: np.ndarray, svals: np.ndarray):
        """Sparse normal matrix H and gradient g (half the objective gradient)."""
        hl, g, sv, pri = self._jacobian_products(poses, svals)
        idx = self.idx
        valid = (idx[:, :, None] >= 0) & (idx[:, None, :] >= 0)
        rows = np.broadcast_to(idx[:, :, None], valid.shape)[valid]
        cols = np.broadcast_to(idx[:, None, :], valid.shape)[valid]
        h = sp.coo_matrix((np.concatenate([hl[valid], pri]),
                           (np.concatenate([rows, sv]), np.concatenate([cols, sv]))),
                          shape=(self.nvar, self.nvar)).tocsr()
        return h, g

    def linearize_blocks(self, poses: np.ndarray, svals: np.ndarray) -> "_Blocks":
        """Normal equations split into pose, simple-feature and remaining groups."""
        if self._blocks is None:
            self._blocks = self._block_plan()
        plan = self._blocks
        hl, g, sv, pri = self._jacobian_products(poses, svals)
        flat = hl.ravel()
        npv, ns, no = self.sizes

        def acc(key, size):
            p, d = plan[key]
            return np.bincount(d, weights=flat[p], minlength=size)

        hpp = acc("pp", npv * npv).reshape(npv, npv)
        hss = acc("ss", 3 * ns).reshape(ns // 3, 3, 3)
        hsp = acc("sp", ns * npv).reshape(ns, npv)
        hop = acc("op", no * npv).reshape(no, npv)
        p, r, c = plan["oo"]
        lsv = self.local[sv]
        hoo = sp.coo_matrix((np.concatenate([flat[p], pri]), (np.concatenate([r, lsv]), np.concatenate([c, lsv]))),
                            shape=(no, no)).tocsc()
        return _Blocks(hpp, hss, hsp, hoo, hop, g)

    def objective(self, poses: np.ndarray, svals: np.ndarray) -> float:
        a = self.a
        e = a.z - between_arrays(poses[a.i], poses[a.j])
        e[:, 2] = wrap_angles(e[:, 2])
        if self.smo.any():
            e[self.smo] *= svals[a.switch[self.smo]][:, None]
        total = float(np.einsum("na,nab,nb->", e, a.info, e))
        s = svals[self.sw]
        return total + float(np.sum(a.switch_priors[self.sw] * (1.0 - s) ** 2))

    def underconstrained(self, h) -> list:
        d = h.diagonal()
        scale = max(1.0, float(np.abs(d).max())) if len(d) else 1.0
        bad = np.nonzero(d <= 1e-12 * scale)[0]
        out = set()
        for k in bad:
            if k < 3 * len(self.free):
                out.add(int(self.free[k // 3]))
            else:
                out.add(-1 - int(self.sw[k - 3 * len(self.free)]))
        return sorted(out)

    def apply(self, poses: np.ndarray, svals: np.ndarray, delta: np.ndarray):
        p = poses.copy()
        s = svals.copy()
        nf = len(self.free)
        if nf:
            p[self.free] += delta[: 3 * nf].reshape(nf, 3)
            p[self.free, 2] = wrap_angles(p[self.free, 2])
        if len(self.sw):
            s[self.sw] = np.clip(s[self.sw] + delta[3 * nf:], 0.0, 1.0)
        return p, s


def _solve_spd(h, rhs: np.ndarray) -> np.ndarray:
    """Solve ``h x = rhs`` for symmetric positive definite ``h``."""
    return _solve_direct(h, rhs)


@dataclass
class _Blocks:
    """Grouped normal equations.

    Variables are split into ego poses (p), simple features whose 3x3 blocks
    couple only to poses (s), and the rest (o: object features and switch
    variables).  There is no s-s coupling across features and no s-o
    coupling, so the s blocks are eliminated in closed form, the o block by a
    sparse factorisation, and the pose Schur complement is solved densely.
    """

    hpp: np.ndarray
    hss: np.ndarray        # (m, 3, 3)
    hsp: np.ndarray        # (3m, np)
    hoo: sp.csc_matrix
    hop: np.ndarray        # (no, np)
    g: np.ndarray          # gradient over all variables (global order)

    def solve(self, prob: "_Problem", rhs: np.ndarray, keep_o: np.ndarray) -> np.ndarray:
        """Solve H x = rhs with the o-variables outside ``keep_o`` held at zero."""
        grp = prob.group
        bp = rhs[grp == 0].copy()
        b1 = rhs[grp == 1]
        b2 = rhs[grp == 2][keep_o]
        s = self.hpp.copy()
        m = len(self.hss)
        x = np.zeros(prob.nvar)
        if m:
            inv = np.linalg.inv(self.hss)
            h1p = self.hsp.reshape(m, 3, -1)
            t1 = np.matmul(inv, h1p).reshape(3 * m, -1)                 # A1^-1 B1
            y1 = np.matmul(inv, b1.reshape(m, 3, 1)).reshape(3 * m)     # A1^-1 b1
            s -= self.hsp.T @ t1
            bp -= self.hsp.T @ y1
        if len(b2):
            a2 = self.hoo if keep_o.all() else self.hoo[keep_o][:, keep_o]
            bo = self.hop[keep_o]
            try:
                lu = spla.splu(sp.csc_matrix(a2), permc_spec="MMD_ATA", options={"SymmetricMode": True})
            except RuntimeError as exc:
                raise np.linalg.LinAlgError(str(exc)) from exc
            y = lu.solve(np.hstack([bo, b2[:, None]]))
            yb, y2 = y[:, :-1], y[:, -1]
            s -= bo.T @ yb
            bp -= bo.T @ y2
        try:
            cf = scipy.linalg.cho_factor(s, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("reduced normal matrix not positive definite") from exc
        xp = scipy.linalg.cho_solve(cf, bp, check_finite=False)
        x[grp == 0] = xp
        if m:
            x[grp == 1] = y1 - t1 @ xp
        if len(b2):
            xo = np.zeros(int((grp == 2).sum()))
            xo[keep_o] = y2 - yb @ xp
            x[grp == 2] = xo
        if not np.all(np.isfinite(x)):
            raise np.linalg.LinAlgError("non-finite solution")
        return x


def _solve_direct(h, rhs: np.ndarray) -> np.ndarray:
    n = h.shape[0]
    if n <= DENSE_LIMIT:
        hd = h.toarray()
        try:
            c = scipy.linalg.cho_factor(hd, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("normal matrix not positive definite") from exc
        return scipy.linalg.cho_solve(c, rhs, check_finite=False)
    try:
        lu = spla.splu(h.tocsc(), permc_spec="MMD_AT_PLUS_A",
                       options={"SymmetricMode": True})
    except RuntimeError as exc:
        raise np.linalg.LinAlgError(str(exc)) from exc
    x = lu.solve(rhs)
    if not np.all(np.isfinite(x)):
        raise np.linalg.LinAlgError("non-finite solution")
    return x


def _gn_step(prob: _Problem, system, g: np.ndarray, svals: np.ndarray, freeze_switches: bool = False) -> np.ndarray:
    """Newton step with switch variables on an active bound frozen.

    ``system`` is either a sparse normal matrix or a :class:`_Blocks`.
    """
    n = prob.nvar
    free = np.ones(n, dtype=bool)
    nf = 3 * len(prob.free)
    s_now = svals[prob.sw]
    # a descent step moves along -g: freeze switches whose bound blocks that direction
    gs = g[nf:]
    free[nf:] = ~(((s_now >= 1.0 - 1e-12) & (gs < 0.0)) | ((s_now <= 1e-12) & (gs > 0.0)))
    if freeze_switches:
        free[nf:] = False
    other = prob.group == 2
    for _ in range(len(prob.sw) + 1):
        delta = np.zeros(n)
        sel = np.nonzero(free)[0]
        if isinstance(system, _Blocks):
            delta = system.solve(prob, -g, free[other])
        elif len(sel) == n:
            delta = _solve_spd(system, -g)
        elif len(sel):
            delta[sel] = _solve_spd(system[sel][:, sel], -g[sel])
        ds = delta[nf:]
        push = ((s_now >= 1.0 - 1e-12) & (ds > 0.0)) | ((s_now <= 1e-12) & (ds < 0.0))
        push &= free[nf:]
        if not push.any():
            return delta
        free[nf:][push] = False
    return delta


def solve(g: FusionGraph, cfg: SolverConfig | None = None) -> SolveReport:
    """Minimise the graph objective in place; returns a :class:`SolveReport`."""
    cfg = cfg or SolverConfig()
    arrays = g.snapshot()
    prob = _Problem(arrays)
    poses = arrays.poses.copy()
    svals = arrays.switch_values.copy()
    rep = SolveReport()
    f = prob.objective(poses, svals)
    rep.initial_objective = rep.final_objective = f
    if prob.nvar == 0:
        rep.converged = True
        rep.message = "no free variables"
        return rep
    for it in range(cfg.max_iterations):
        if prob.use_blocks():
            system = prob.linearize_blocks(poses, svals)
            grad = system.g
        else:
            system, grad = prob.linearize(poses, svals)
        try:
            delta = _gn_step(prob, system, grad, svals, it < cfg.pose_only_iterations)
        except np.linalg.LinAlgError:
            rep.underconstrained = prob.underconstrained(prob.linearize(poses, svals)[0])
            rep.message = "singular normal matrix"
            log.warning("solve failed: %s (vertices %s)", rep.message, rep.underconstrained)
            break
        step = 1.0
        accepted = False
        for _ in range(cfg.max_halvings + 1):
            p_new, s_new = prob.apply(poses, svals, step * delta)
            f_new = prob.objective(p_new, s_new)
            if f_new <= f:
                accepted = True
                break
            step *= 0.5
        rep.iterations = it + 1
        norm = float(np.max(np.abs(step * delta))) if accepted else 0.0
        rep.update_norms.append(norm)
        if not accepted:
            # no descent along the Gauss-Newton direction: we are at a (local) minimum
            rep.converged = float(np.max(np.abs(delta))) < cfg.tolerance or f == 0.0
            rep.message = "no decrease along step"
            break
        poses, svals, f = p_new, s_new, f_new
        if norm < cfg.tolerance:
            rep.converged = True
            break
    rep.final_objective = f
    _write_back(g, prob, poses, svals)
    return rep


def _write_back(g: FusionGraph, prob: _Problem, poses: np.ndarray, svals: np.ndarray) -> None:
    g.v.pose[prob.free] = poses[prob.free]
    g.s.value[prob.sw] = svals[prob.sw]


def marginal_covariances(g: FusionGraph, vertex_ids) -> dict:
    """3x3 marginal covariance blocks of H^-1 for the given vertices."""
    arrays = g.snapshot()
    prob = _Problem(arrays)
    h, _ = prob.linearize(arrays.poses, arrays.switch_values)
    vertex_ids = [int(v) for v in vertex_ids if prob.var_of[v] >= 0]
    if not vertex_ids:
        return {}
    cols = np.concatenate([prob.var_of[v] + np.arange(3) for v in vertex_ids])
    rhs = np.zeros((prob.nvar, len(cols)))
    rhs[cols, np.arange(len(cols))] = 1.0
    sol = _solve_spd(h, rhs)
    out = {}
    for k, v in enumerate(vertex_ids):
        blk = sol[cols[3 * k: 3 * k + 3], 3 * k: 3 * k + 3]
        out[v] = 0.5 * (blk + blk.T)
    return out


def extract_fused_features(g: FusionGraph, covariance: str = "marginal") -> list:
    """One :class:`LaneFeature` per feature vertex at its optimised pose.

    ``covariance="marginal"`` takes the marginal block of the inverse normal
    matrix; ``"diagonal"`` uses the diagonal of the fused measurement
    covariance inflated by 1/confidence, which is far cheaper.
    """
    ids = g.feature_ids()
    if covariance not in ("marginal", "diagonal"):
        raise ValueError(f"unknown covariance mode {covariance!r}")
    marg = {}
    if covariance == "marginal" and len(ids):
        try:
            marg = marginal_covariances(g, ids)
        except np.linalg.LinAlgError:
            log.warning("marginals unavailable, falling back to diagonal covariances")
    conf = np.clip(g.v.conf[ids], 0.0, 1.0)
    info = g.v.info[ids]
    ok = np.linalg.det(info) > 0.0
    diag = np.ones((len(ids), 3))
    if ok.any():
        diag[ok] = np.diagonal(np.linalg.inv(info[ok]), axis1=1, axis2=2)
    diag = np.maximum(diag, 1e-12) / np.maximum(conf, 0.05)[:, None]
    covs = np.zeros((len(ids), 3, 3))
    covs[:, [0, 1, 2], [0, 1, 2]] = diag
    poses = g.v.pose[ids].tolist()
    out = []
    for k, v in enumerate(ids):
        x, y, t = poses[k]
        out.append(LaneFeature.trusted(Pose2(x, y, t), float(conf[k]), marg.get(v, covs[k])))
    return out


def feature_source_masks(g: FusionGraph, ids=None) -> np.ndarray:
    ids = g.feature_ids() if ids is None else ids
    return g.v.src[ids].copy()
