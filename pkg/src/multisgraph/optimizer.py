"""Levenberg-Marquardt over keyframe poses, planes and room centres.

State blocks and their tangent spaces:

* keyframe: SE(3), right perturbation ``T <- T Exp(xi)`` with ``xi = (rho, phi)``
* plane: unit normal on S^2 (2 DoF through ``tangent_basis``) and distance
* room: 2-vector centre
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from .errors import SingularSystem
from .geometry import (
    Pose3,
    quat_conjugate_batch,
    quat_multiply_batch,
    quat_to_matrix_batch,
    se3_left_jacobian_inv_batch,
    se3_log_batch,
    se3_right_jacobian_inv,
    skew,
    skew_batch,
    sphere_retract,
    tangent_basis,
)
from .sgraph import AgentGraph, FactorEdge, PlaneParam, pair_sign, room_center_ordered

DIM = {"kf": 6, "plane": 3, "room": 2}
_XY = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


@dataclass
class OptimizerConfig:
    initial_damping: float = 1e-4
    damping_up: float = 10.0
    damping_down: float = 0.5
    max_iterations: int = 100
    relative_tolerance: float = 1e-8
    gradient_tolerance: float = 1e-10
    huber_delta: float = 1.0
    max_rejections: int = 12


@dataclass
class OptimizationReport:
    initial_cost: float
    final_cost: float
    iterations: int
    accepted: int = 0
    cost_history: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "iterations": self.iterations,
            "accepted": self.accepted,
        }


# ---------------------------------------------------------------------------
# residuals and Jacobians
# ---------------------------------------------------------------------------


def residual_odometry(Ti: Pose3, Tj: Pose3, Z: Pose3) -> np.ndarray:
    return (Z.inverse() @ Ti.inverse() @ Tj).log()


def jacobian_odometry(Ti: Pose3, Tj: Pose3, Z: Pose3):
    """Residual and its derivatives w.r.t. the right perturbations of Ti and Tj."""
    r = residual_odometry(Ti, Tj, Z)
    Jr_inv = se3_right_jacobian_inv(r)
    Jj = Jr_inv
    Ji = -Jr_inv @ (Tj.inverse() @ Ti).adjoint()
    return r, Ji, Jj


def _predicted(T: Pose3, plane: PlaneParam):
    m = T.R.T @ plane.n
    return m, plane.d - float(plane.n @ T.t)


def residual_pose_plane(T: Pose3, plane: PlaneParam, obs: PlaneParam) -> np.ndarray:
    """Map plane moved into the keyframe frame, compared with the observation.

    Normal part: tangent-plane coordinates of the predicted normal at the
    observed one; distance part: ``d_obs - d_pred``. The predicted plane is
    sign-aligned with the observation first.
    """
    m, d_pred = _predicted(T, plane)
    s = 1.0 if float(obs.n @ m) >= 0.0 else -1.0
    B = tangent_basis(obs.n)
    return np.r_[s * (B.T @ m), obs.d - s * d_pred]


def jacobian_pose_plane(T: Pose3, plane: PlaneParam, obs: PlaneParam):
    m, d_pred = _predicted(T, plane)
    s = 1.0 if float(obs.n @ m) >= 0.0 else -1.0
    B = tangent_basis(obs.n)
    r = np.r_[s * (B.T @ m), obs.d - s * d_pred]
    JT = np.zeros((3, 6))
    JT[:2, 3:] = s * B.T @ skew(m)
    JT[2, :3] = s * m
    Bp = tangent_basis(plane.n)
    Jp = np.zeros((3, 3))
    Jp[:2, :2] = s * B.T @ T.R.T @ Bp
    Jp[2, :2] = s * (T.t @ Bp)
    Jp[2, 2] = -s
    return r, JT, Jp


def residual_room_plane(center: np.ndarray, planes: list[PlaneParam]) -> np.ndarray:
    """Room centre minus the centre implied by its ordered planes (a1, b1, a2, b2)."""
    return np.asarray(center, dtype=float) - room_center_ordered(planes)


def jacobian_room_plane(center: np.ndarray, planes: list[PlaneParam]):
    r = residual_room_plane(center, planes)
    Jc = np.eye(2)
    Jp = []
    for a, b in ((planes[0], planes[1]), (planes[2], planes[3])):
        s = pair_sign(a, b)
        u = 0.5 * (a.n - s * b.n)
        m = 0.5 * (a.d - s * b.d)
        Ja = np.zeros((2, 3))
        Ja[:, :2] = -0.5 * m * _XY @ tangent_basis(a.n)
        Ja[:, 2] = -0.5 * u[:2]
        Jb = np.zeros((2, 3))
        Jb[:, :2] = 0.5 * s * m * _XY @ tangent_basis(b.n)
        Jb[:, 2] = 0.5 * s * u[:2]
        Jp += [Ja, Jb]
    return r, Jc, Jp


def residual_plane_prior(plane: PlaneParam, measured: PlaneParam) -> np.ndarray:
    s = 1.0 if float(measured.n @ plane.n) >= 0.0 else -1.0
    B = tangent_basis(measured.n)
    return np.r_[s * (B.T @ plane.n), s * plane.d - measured.d]


def jacobian_plane_prior(plane: PlaneParam, measured: PlaneParam):
    s = 1.0 if float(measured.n @ plane.n) >= 0.0 else -1.0
    B = tangent_basis(measured.n)
    r = np.r_[s * (B.T @ plane.n), s * plane.d - measured.d]
    J = np.zeros((3, 3))
    J[:2, :2] = s * B.T @ tangent_basis(plane.n)
    J[2, 2] = s
    return r, J


def residual_pose_prior(T: Pose3, measured: Pose3) -> np.ndarray:
    return (measured.inverse() @ T).log()


# ---------------------------------------------------------------------------
# state handling
# ---------------------------------------------------------------------------


@dataclass
class _State:
    poses: dict
    planes: dict
    rooms: dict

    def copy(self) -> _State:
        return _State(dict(self.poses), dict(self.planes), {k: v.copy() for k, v in self.rooms.items()})

    def get(self, key):
        kind, i = key
        return {"kf": self.poses, "plane": self.planes, "room": self.rooms}[kind][i]


def _retract(state: _State, index: dict, dx: np.ndarray) -> _State:
    out = state.copy()
    for key, (start, dim) in index.items():
        kind, i = key
        step = dx[start : start + dim]
        if kind == "kf":
            out.poses[i] = state.poses[i] @ Pose3.exp(step)
        elif kind == "plane":
            p = state.planes[i]
            out.planes[i] = PlaneParam(sphere_retract(p.n, step[:2]), p.d + step[2])
        else:
            out.rooms[i] = state.rooms[i] + step
    return out


def linearize(factor: FactorEdge, state: _State):
    """Residual and per-vertex Jacobian blocks of one factor."""
    kind = factor.kind
    v = factor.vertices
    if kind == "odometry":
        r, Ji, Jj = jacobian_odometry(state.get(v[0]), state.get(v[1]), factor.measurement)
        return r, [Ji, Jj]
    if kind == "pose_plane":
        r, JT, Jp = jacobian_pose_plane(state.get(v[0]), state.get(v[1]), factor.measurement)
        return r, [JT, Jp]
    if kind == "room_plane":
        r, Jc, Jp = jacobian_room_plane(state.get(v[0]), [state.get(x) for x in v[1:]])
        return r, [Jc] + Jp
    if kind == "prior":
        target = v[0][0]
        x = state.get(v[0])
        if target == "kf":
            r = residual_pose_prior(x, factor.measurement)
            return r, [se3_right_jacobian_inv(r)]
        if target == "plane":
            r, J = jacobian_plane_prior(x, factor.measurement)
            return r, [J]
        return x - np.asarray(factor.measurement, dtype=float), [np.eye(2)]
    raise ValueError(f"unknown factor kind {kind!r}")


def factor_residual(factor: FactorEdge, state: _State) -> np.ndarray:
    kind = factor.kind
    v = factor.vertices
    if kind == "odometry":
        return residual_odometry(state.get(v[0]), state.get(v[1]), factor.measurement)
    if kind == "pose_plane":
        return residual_pose_plane(state.get(v[0]), state.get(v[1]), factor.measurement)
    if kind == "room_plane":
        return residual_room_plane(state.get(v[0]), [state.get(x) for x in v[1:]])
    target = v[0][0]
    x = state.get(v[0])
    if target == "kf":
        return residual_pose_prior(x, factor.measurement)
    if target == "plane":
        return residual_plane_prior(x, factor.measurement)
    return x - np.asarray(factor.measurement, dtype=float)


def _huber(sq: float, delta: float) -> tuple[float, float]:
    """(cost, IRLS weight) for a squared whitened norm."""
    a = np.sqrt(sq)
    if a <= delta:
        return 0.5 * sq, 1.0
    return delta * (a - 0.5 * delta), delta / a


def _huber_batch(sq: np.ndarray, delta: float) -> tuple[np.ndarray, np.ndarray]:
    a = np.sqrt(sq)
    small = a <= delta
    cost = np.where(small, 0.5 * sq, delta * (a - 0.5 * delta))
    weight = np.where(small, 1.0, delta / np.maximum(a, 1e-300))
    return cost, weight


def _cost(factors: list[FactorEdge], state: _State, delta: float) -> float:
    total = 0.0
    for f in factors:
        r = factor_residual(f, state)
        sq = float(r @ f.information @ r)
        total += _huber(sq, delta)[0] if f.robust else 0.5 * sq
    return total


def _state_of(graph: AgentGraph) -> _State:
    return _State(
        {k: kf.pose for k, kf in graph.keyframes.items()},
        {k: p.param for k, p in graph.planes.items()},
        {k: np.asarray(r.center, dtype=float).copy() for k, r in graph.rooms.items()},
    )


def _index(graph: AgentGraph, factors: list[FactorEdge]) -> tuple[dict, int]:
    keys = sorted({v for f in factors for v in f.vertices}, key=lambda k: ({"kf": 0, "plane": 1, "room": 2}[k[0]], k[1]))
    index = {}
    n = 0
    for k in keys:
        index[k] = (n, DIM[k[0]])
        n += DIM[k[0]]
    return index, n


def _basis_batch(n: np.ndarray) -> np.ndarray:
    """Row-wise ``tangent_basis``: (N, 3) -> (N, 3, 2)."""
    axis = np.zeros_like(n)
    axis[np.arange(len(n)), np.argmin(np.abs(n), axis=1)] = 1.0
    b1 = np.cross(n, axis)
    b1 /= np.linalg.norm(b1, axis=1, keepdims=True)
    b2 = np.cross(n, b1)
    return np.stack([b1, b2], axis=2)


class _Problem:
    """Factors compiled for repeated evaluation; pose-plane factors are batched."""

    def __init__(self, factors: list[FactorEdge], index: dict, n: int, delta: float):
        self.index, self.n, self.delta = index, n, delta
        pp = [f for f in factors if f.kind == "pose_plane"]
        od = [f for f in factors if f.kind == "odometry"]
        self.others = [f for f in factors if f.kind not in ("pose_plane", "odometry")]
        self.n_od = len(od)
        if od:
            self.od_i = [f.vertices[0][1] for f in od]
            self.od_j = [f.vertices[1][1] for f in od]
            self.od_zq_inv = quat_conjugate_batch(np.array([f.measurement.q for f in od]))
            self.od_zt = np.array([f.measurement.t for f in od])
            self.od_zR = quat_to_matrix_batch(np.array([f.measurement.q for f in od]))
            self.od_L = np.linalg.cholesky(np.array([f.information for f in od])).transpose(0, 2, 1)
            self.od_cols_i = np.array([index[("kf", k)][0] for k in self.od_i])
            self.od_cols_j = np.array([index[("kf", k)][0] for k in self.od_j])
        self.n_pp = len(pp)
        if pp:
            self.pp_kf = [f.vertices[0][1] for f in pp]
            self.pp_pl = [f.vertices[1][1] for f in pp]
            self.pp_on = np.array([f.measurement.n for f in pp])
            self.pp_od = np.array([f.measurement.d for f in pp])
            self.pp_B = _basis_batch(self.pp_on)
            self.pp_L = np.linalg.cholesky(np.array([f.information for f in pp])).transpose(0, 2, 1)
            self.pp_robust = np.array([f.robust for f in pp])
            self.pp_cols_kf = np.array([index[("kf", k)][0] for k in self.pp_kf])
            self.pp_cols_pl = np.array([index[("plane", k)][0] for k in self.pp_pl])
        self.other_L = [np.linalg.cholesky(f.information).T for f in self.others]

    # pose-plane batch -------------------------------------------------
    def _pp_eval(self, state: _State, jac: bool):
        R = np.array([state.poses[k].R for k in self.pp_kf])
        t = np.array([state.poses[k].t for k in self.pp_kf])
        pn = np.array([state.planes[k].n for k in self.pp_pl])
        pd = np.array([state.planes[k].d for k in self.pp_pl])
        m = np.einsum("nji,nj->ni", R, pn)
        d_pred = pd - np.einsum("ni,ni->n", pn, t)
        s = np.where(np.einsum("ni,ni->n", self.pp_on, m) >= 0.0, 1.0, -1.0)
        B = self.pp_B
        r = np.empty((self.n_pp, 3))
        r[:, :2] = s[:, None] * np.einsum("nki,nk->ni", B, m)
        r[:, 2] = self.pp_od - s * d_pred
        if not jac:
            return r, None, None
        JT = np.zeros((self.n_pp, 3, 6))
        JT[:, :2, 3:] = s[:, None, None] * np.einsum("nki,nkj->nij", B, skew_batch(m))
        JT[:, 2, :3] = s[:, None] * m
        Bp = _basis_batch(pn)
        Jp = np.zeros((self.n_pp, 3, 3))
        Jp[:, :2, :2] = s[:, None, None] * np.einsum("nki,nlk,nlj->nij", B, R, Bp)
        Jp[:, 2, :2] = s[:, None] * np.einsum("nk,nkj->nj", t, Bp)
        Jp[:, 2, 2] = -s
        return r, JT, Jp

    # odometry batch -----------------------------------------------------
    def _od_eval(self, state: _State, jac: bool):
        qi = np.array([state.poses[k].q for k in self.od_i])
        qj = np.array([state.poses[k].q for k in self.od_j])
        ti = np.array([state.poses[k].t for k in self.od_i])
        tj = np.array([state.poses[k].t for k in self.od_j])
        Ri = quat_to_matrix_batch(qi)
        Rj = quat_to_matrix_batch(qj)
        # E = Z^-1 Ti^-1 Tj
        q_rel = quat_multiply_batch(quat_conjugate_batch(qi), qj)
        t_rel = np.einsum("nji,nj->ni", Ri, tj - ti)
        qE = quat_multiply_batch(self.od_zq_inv, q_rel)
        tE = np.einsum("nji,nj->ni", self.od_zR, t_rel - self.od_zt)
        r = se3_log_batch(qE, tE)
        if not jac:
            return r, None, None
        Jr_inv = se3_left_jacobian_inv_batch(-r)
        # adjoint of Tj^-1 Ti
        R = np.einsum("nki,nkj->nij", Rj, Ri)
        t = np.einsum("nki,nk->ni", Rj, ti - tj)
        Ad = np.zeros((self.n_od, 6, 6))
        Ad[:, :3, :3] = R
        Ad[:, 3:, 3:] = R
        Ad[:, :3, 3:] = skew_batch(t) @ R
        return r, -Jr_inv @ Ad, Jr_inv

    def _pp_weights(self, rw: np.ndarray):
        sq = np.einsum("ni,ni->n", rw, rw)
        cost, w = _huber_batch(sq, self.delta)
        cost = np.where(self.pp_robust, cost, 0.5 * sq)
        w = np.where(self.pp_robust, w, 1.0)
        return cost, w

    # public -------------------------------------------------------------
    def cost(self, state: _State) -> float:
        total = 0.0
        if self.n_pp:
            r, _, _ = self._pp_eval(state, False)
            rw = np.einsum("nij,nj->ni", self.pp_L, r)
            total += float(self._pp_weights(rw)[0].sum())
        if self.n_od:
            r, _, _ = self._od_eval(state, False)
            rw = np.einsum("nij,nj->ni", self.od_L, r)
            total += 0.5 * float(np.einsum("ni,ni->", rw, rw))
        for f, L in zip(self.others, self.other_L):
            rw = L @ factor_residual(f, state)
            sq = float(rw @ rw)
            total += _huber(sq, self.delta)[0] if f.robust else 0.5 * sq
        return total

    def normal_equations(self, state: _State):
        rows, cols, vals, res = [], [], [], []
        row = 0
        if self.n_pp:
            r, JT, Jp = self._pp_eval(state, True)
            rw = np.einsum("nij,nj->ni", self.pp_L, r)
            _, w = self._pp_weights(rw)
            sw = np.sqrt(w)
            rw = sw[:, None] * rw
            JTw = sw[:, None, None] * np.einsum("nij,njk->nik", self.pp_L, JT)
            Jpw = sw[:, None, None] * np.einsum("nij,njk->nik", self.pp_L, Jp)
            base = (np.arange(self.n_pp) * 3)[:, None, None] + np.arange(3)[None, :, None]
            for J, c0, dim in ((JTw, self.pp_cols_kf, 6), (Jpw, self.pp_cols_pl, 3)):
                rr = np.broadcast_to(base, (self.n_pp, 3, dim))
                cc = np.broadcast_to(c0[:, None, None] + np.arange(dim)[None, None, :], (self.n_pp, 3, dim))
                rows.append(rr.ravel())
                cols.append(cc.ravel())
                vals.append(J.ravel())
            res.append(rw.ravel())
            row = 3 * self.n_pp
        if self.n_od:
            r, Ji, Jj = self._od_eval(state, True)
            rw = np.einsum("nij,nj->ni", self.od_L, r)
            base = row + (np.arange(self.n_od) * 6)[:, None, None] + np.arange(6)[None, :, None]
            for J, c0 in ((Ji, self.od_cols_i), (Jj, self.od_cols_j)):
                Jw = np.einsum("nij,njk->nik", self.od_L, J)
                rr = np.broadcast_to(base, (self.n_od, 6, 6))
                cc = np.broadcast_to(c0[:, None, None] + np.arange(6)[None, None, :], (self.n_od, 6, 6))
                rows.append(rr.ravel())
                cols.append(cc.ravel())
                vals.append(Jw.ravel())
            res.append(rw.ravel())
            row += 6 * self.n_od
        for f, L in zip(self.others, self.other_L):
            r, blocks = linearize(f, state)
            rw = L @ r
            w = _huber(float(rw @ rw), self.delta)[1] if f.robust else 1.0
            sw = np.sqrt(w)
            k = len(r)
            for v, J in zip(f.vertices, blocks):
                c0, dim = self.index[v]
                Jw = sw * (L @ J)
                rows.append(np.repeat(np.arange(row, row + k), dim))
                cols.append(np.tile(np.arange(c0, c0 + dim), k))
                vals.append(Jw.ravel())
            res.append(sw * rw)
            row += k
        J = sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(row, self.n)
        )
        rvec = np.concatenate(res)
        H = (J.T @ J).tocsc()
        g = J.T @ rvec
        return H, g


def _solve(H, g) -> np.ndarray:
    dx = splinalg.spsolve(H, -g)
    if not np.all(np.isfinite(dx)):
        raise np.linalg.LinAlgError("non-finite step")
    return dx


def optimize(graph: AgentGraph, config: Optional[OptimizerConfig] = None) -> OptimizationReport:
    """Run LM on the whole graph and write the result back in place."""
    config = config or OptimizerConfig()
    factors = list(graph.factors)
    if not any(f.kind == "prior" and f.vertices[0][0] == "kf" for f in factors):
        raise SingularSystem("no keyframe prior: the gauge is free")
    state = _state_of(graph)
    index, n = _index(graph, factors)
    problem = _Problem(factors, index, n, config.huber_delta)
    cost = problem.cost(state)
    report = OptimizationReport(cost, cost, 0, 0, [cost])
    if n == 0:
        return report

    lam = config.initial_damping
    H, g = problem.normal_equations(state)
    diag = H.diagonal()
    if np.any(diag <= 0):
        raise SingularSystem("a state variable is not constrained by any factor")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", splinalg.MatrixRankWarning)
            splinalg.splu(H)
    except (RuntimeError, splinalg.MatrixRankWarning) as exc:
        raise SingularSystem("normal equations are rank deficient") from exc

    it = 0
    for it in range(1, config.max_iterations + 1):
        if np.max(np.abs(g)) < config.gradient_tolerance:
            it -= 1  # already at a stationary point
            break
        D = sparse.diags(H.diagonal())
        improved = False
        for _ in range(config.max_rejections):
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("error", splinalg.MatrixRankWarning)
                    dx = _solve((H + lam * D).tocsc(), g)
            except (np.linalg.LinAlgError, RuntimeError, splinalg.MatrixRankWarning):
                lam *= config.damping_up
                continue
            cand = _retract(state, index, dx)
            new_cost = problem.cost(cand)
            if new_cost <= cost:
                improved = True
                break
            lam *= config.damping_up
        if not improved:
            break
        rel = (cost - new_cost) / max(cost, 1e-300)
        state, cost = cand, new_cost
        lam *= config.damping_down
        report.accepted += 1
        report.cost_history.append(cost)
        if rel < config.relative_tolerance:
            break
        H, g = problem.normal_equations(state)

    report.iterations = it
    report.final_cost = cost
    _write_back(graph, state)
    return report


def _write_back(graph: AgentGraph, state: _State) -> None:
    for k, pose in state.poses.items():
        graph.keyframes[k].pose = pose
    for k, p in state.planes.items():
        graph.planes[k].param = p.canonical()
    for k, c in state.rooms.items():
        graph.rooms[k].center = c
    graph.recompute_floor()


def total_cost(graph: AgentGraph, config: Optional[OptimizerConfig] = None) -> float:
    config = config or OptimizerConfig()
    return _cost(list(graph.factors), _state_of(graph), config.huber_delta)
