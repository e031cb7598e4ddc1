"""Direct multiple-shooting transcription of the fixed-order coordination problem.

Per vehicle the primal variables are w = (x_0, u_0, x_1, u_1, ..., u_{K-1}, x_K)
followed by the crossing times T = (t_in, t_out) for every conflict zone the
vehicle's lane crosses.  Offsets inside w: p_k = 4k, v_k = 4k+1, E_k = 4k+2,
Fb_k = 4k+3.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .vehicle_model import DEFAULT_PARAMS, DomainError, VehicleParams, interval_index, reference_input, rk4_step

T_CLIP = 1e-6  # crossing times are kept this far inside [0, K dt]
N_PATH_CONTROL_ROWS = 5
N_PATH_STATE_ROWS = 2


class ScenarioError(ValueError):
    """Invalid or infeasible scenario description."""


@dataclass(frozen=True)
class CzCrossing:
    cz: int
    p_in: float
    p_out: float


@dataclass(frozen=True)
class Vehicle:
    lane: int
    p0: float
    v0: float
    v_ref: float
    params: VehicleParams = DEFAULT_PARAMS


@dataclass(frozen=True)
class Scenario:
    """Immutable problem instance.

    ``lanes[l]`` lists vehicle indices from the rearmost to the foremost
    vehicle, so entry m+1 drives ahead of entry m.  ``crossings[l]`` lists the
    conflict zones crossed by lane l in driving order.  ``order`` holds the
    crossing-order triples (i, j, r): vehicle i leaves zone r before j enters.
    """

    dt: float
    K: int
    vehicles: tuple[Vehicle, ...]
    lanes: tuple[tuple[int, ...], ...]
    crossings: tuple[tuple[CzCrossing, ...], ...]
    order: tuple[tuple[int, int, int], ...] = ()

    def __post_init__(self):
        if self.K < 1 or not self.dt > 0:
            raise ScenarioError("need K >= 1 and dt > 0")
        if len(self.crossings) != len(self.lanes):
            raise ScenarioError("one crossing list per lane is required")
        seen = sorted(i for lane in self.lanes for i in lane)
        if seen != list(range(len(self.vehicles))):
            raise ScenarioError("every vehicle must appear on exactly one lane")
        for l, lane in enumerate(self.lanes):
            for i in lane:
                if self.vehicles[i].lane != l:
                    raise ScenarioError(f"vehicle {i} lane field disagrees with lane {l}")
            for a, b in zip(lane[:-1], lane[1:]):
                va, vb = self.vehicles[a], self.vehicles[b]
                if va.p0 + va.params.delta > vb.p0 + 1e-12:
                    raise ScenarioError(f"vehicles {a} and {b} violate the initial gap")
            for c in self.crossings[l]:
                if not c.p_in < c.p_out:
                    raise ScenarioError(f"lane {l} zone {c.cz}: p_in must be < p_out")
        for (i, j, r) in self.order:
            if i == j:
                raise ScenarioError(f"triple {(i, j, r)} orders a vehicle against itself")
            for v in (i, j):
                if v >= len(self.vehicles) or r not in self.zones_of(v):
                    raise ScenarioError(f"triple {(i, j, r)} references a missing crossing")

    @property
    def n_vehicles(self) -> int:
        return len(self.vehicles)

    @property
    def n_lanes(self) -> int:
        return len(self.lanes)

    def zones_of(self, i: int) -> list[int]:
        return [c.cz for c in self.crossings[self.vehicles[i].lane]]

    def crossings_of(self, i: int) -> tuple[CzCrossing, ...]:
        return self.crossings[self.vehicles[i].lane]

    def n_T(self, i: int) -> int:
        return 2 * len(self.crossings_of(i))

    def t_index(self, i: int, r: int, which: str) -> int:
        m = self.zones_of(i).index(r)
        return 2 * m + (0 if which == "in" else 1)

    def x0(self, i: int) -> np.ndarray:
        v = self.vehicles[i]
        return np.array([v.p0, v.v0])


@dataclass
class ConstraintEval:
    """Constraint values and a dense Jacobian w.r.t. the listed variables."""

    value: np.ndarray
    jac: np.ndarray
    cols: str = ""


# ---- index helpers ----

def n_w(K: int) -> int:
    return 4 * K + 2


def n_path(K: int) -> int:
    return N_PATH_CONTROL_ROWS * K + N_PATH_STATE_ROWS * (K + 1)


def split_w(w: np.ndarray, K: int):
    """Views of the node states (K+1, 2) and controls (K, 2)."""
    xs = np.empty((K + 1, 2), dtype=w.dtype)
    xs[:K] = w[: 4 * K].reshape(K, 4)[:, :2]
    xs[K] = w[4 * K: 4 * K + 2]
    us = w[: 4 * K].reshape(K, 4)[:, 2:]
    return xs, us


def pos_idx(K: int) -> np.ndarray:
    return 4 * np.arange(K + 1)


def vel_idx(K: int) -> np.ndarray:
    return 4 * np.arange(K + 1) + 1


def clip_time(t, K: int, dt: float):
    return np.clip(t, T_CLIP, K * dt - T_CLIP)


# ---- constraint families ----

def equality_constraints(scn: Scenario, i: int, w, T) -> ConstraintEval:
    """Initial condition, shooting defects and crossing-time definitions.

    Columns of the Jacobian are (w, T).
    """
    K, dt = scn.K, scn.dt
    params = scn.vehicles[i].params
    w = np.asarray(w, dtype=float)
    T = np.asarray(T, dtype=float)
    crossings = scn.crossings_of(i)
    nT = 2 * len(crossings)
    if T.shape != (nT,):
        raise ValueError(f"vehicle {i}: expected {nT} crossing times")
    if np.any((T < 0) | (T > K * dt)):
        raise DomainError(f"vehicle {i}: crossing time outside [0, {K * dt}]")
    nw = n_w(K)
    xs, us = split_w(w, K)
    g = np.empty(2 * (K + 1) + nT)
    jac = np.zeros((g.size, nw + nT))

    g[:2] = xs[0] - scn.x0(i)
    jac[0, 0] = jac[1, 1] = 1.0

    st = rk4_step(params, xs[:K], us, dt)
    g[2: 2 * (K + 1)] = (xs[1:] - st.x_next).ravel()
    rows = 2 + 2 * np.arange(K)
    cols = 4 * np.arange(K)
    for a in range(2):
        jac[rows + a, cols + 4 + a] = 1.0
        for b in range(2):
            jac[rows + a, cols + b] = -st.jac_x[:, a, b]
            jac[rows + a, cols + 2 + b] = -st.jac_u[:, a, b]

    row = 2 * (K + 1)
    for m, c in enumerate(crossings):
        for q, target in enumerate((c.p_in, c.p_out)):
            t = T[2 * m + q]
            k = interval_index(t, dt, K)
            ps = rk4_step(params, xs[k], us[k], t - k * dt)
            g[row] = ps.x_next[0, 0] - target
            jac[row, 4 * k: 4 * k + 2] = ps.jac_x[0, 0]
            jac[row, 4 * k + 2: 4 * k + 4] = ps.jac_u[0, 0]
            jac[row, nw + 2 * m + q] = ps.d_h[0, 0]
            row += 1
    return ConstraintEval(g, jac, "w,T")


def path_constraints(scn: Scenario, i: int, w) -> ConstraintEval:
    """Actuator, power and speed limits on the shooting grid, scaled by their bounds.

    Row blocks: E <= Emax, E*cw*v <= Pmax, -E <= Emax, Fb >= 0, Fb <= FbMax
    (k < K), then v >= 0 and cw*v <= wmax (k <= K).
    """
    K = scn.K
    prm = scn.vehicles[i].params
    w = np.asarray(w)
    xs, us = split_w(w, K)
    v, e, fb = xs[:, 1], us[:, 0], us[:, 1]
    vc = v[:K]
    h = np.concatenate([
        (e - prm.e_max) / prm.e_max,
        (e * prm.c_w * vc - prm.p_max) / prm.p_max,
        (-e - prm.e_max) / prm.e_max,
        -fb / prm.fb_max,
        (fb - prm.fb_max) / prm.fb_max,
        -v / prm.v_max,
        (prm.c_w * v - prm.w_max) / prm.w_max,
    ])
    jac = np.zeros((h.size, n_w(K)), dtype=h.dtype)
    k = np.arange(K)
    ie, ifb, iv = 4 * k + 2, 4 * k + 3, 4 * k + 1
    jac[k, ie] = 1.0 / prm.e_max
    jac[K + k, ie] = prm.c_w * vc / prm.p_max
    jac[K + k, iv] = prm.c_w * e / prm.p_max
    jac[2 * K + k, ie] = -1.0 / prm.e_max
    jac[3 * K + k, ifb] = -1.0 / prm.fb_max
    jac[4 * K + k, ifb] = 1.0 / prm.fb_max
    kk = np.arange(K + 1)
    jac[5 * K + kk, 4 * kk + 1] = -1.0 / prm.v_max
    jac[6 * K + 1 + kk, 4 * kk + 1] = prm.c_w / prm.w_max
    return ConstraintEval(h, jac, "w")


def path_hessian_weights(scn: Scenario, i: int, mu) -> tuple[np.ndarray, np.ndarray]:
    """Curvature of mu^T h_path: only the bilinear power rows contribute.

    Returns the per-interval weight on the (v_k, E_k) cross term.
    """
    K = scn.K
    prm = scn.vehicles[i].params
    mu = np.asarray(mu)
    return np.arange(K), mu[K: 2 * K] * prm.c_w / prm.p_max


def reca_constraints(scn: Scenario, l: int, positions) -> ConstraintEval:
    """Rear-end gaps p_{i,k} + delta_i - p_{i+1,k} <= 0 for each adjacent pair.

    ``positions`` lists the (K+1,) position tracks of the lane's vehicles in
    lane order.  Jacobian columns are the stacked tracks.
    """
    lane = scn.lanes[l]
    K1 = scn.K + 1
    n = len(lane)
    if len(positions) != n:
        raise ValueError("one position track per lane vehicle is required")
    if n < 2:
        return ConstraintEval(np.zeros(0), np.zeros((0, n * K1)), "p")
    rows = []
    jac = np.zeros(((n - 1) * K1, n * K1))
    for m in range(n - 1):
        delta = scn.vehicles[lane[m]].params.delta
        rows.append(np.asarray(positions[m]) + delta - np.asarray(positions[m + 1]))
        r = np.arange(K1) + m * K1
        jac[r, m * K1 + np.arange(K1)] = 1.0
        jac[r, (m + 1) * K1 + np.arange(K1)] = -1.0
    return ConstraintEval(np.concatenate(rows), jac, "p")


def sica_matrix(scn: Scenario) -> np.ndarray:
    """Constant Jacobian of the crossing-order rows w.r.t. all crossing times.

    Columns follow vehicles in index order, each with its own T layout.
    """
    offs = np.cumsum([0] + [scn.n_T(i) for i in range(scn.n_vehicles)])
    C = np.zeros((len(scn.order), offs[-1]))
    for row, (i, j, r) in enumerate(scn.order):
        C[row, offs[i] + scn.t_index(i, r, "out")] = 1.0
        C[row, offs[j] + scn.t_index(j, r, "in")] = -1.0
    return C


def sica_constraints(scn: Scenario, T_all) -> ConstraintEval:
    """One row t_out(i, r) - t_in(j, r) per crossing-order triple."""
    vals = np.array([
        T_all[i][scn.t_index(i, r, "out")] - T_all[j][scn.t_index(j, r, "in")]
        for (i, j, r) in scn.order
    ], dtype=float)
    return ConstraintEval(vals, sica_matrix(scn), "T")


# ---- objective ----

def lqr_terminal_weight(params: VehicleParams, v_ref: float, dt: float) -> float:
    """Scalar discrete Riccati solution for the speed channel linearized at v_ref.

    The linear model is the RK4 step Jacobian at the steady state.  With
    b = input row and beta = b R^-1 b^T, the Riccati fixed point
    P = Q + a^2 P / (1 + beta P) is the positive root of a quadratic.
    """
    q, r = stage_weights(params, v_ref)
    ur = reference_input(params, v_ref)
    st = rk4_step(params, [0.0, v_ref], ur, dt)
    a = st.jac_x[0, 1, 1]
    b = st.jac_u[0, 1]
    beta = float(b @ np.linalg.solve(r, b))
    c1 = 1.0 - q * beta - a * a
    return (-c1 + math.sqrt(c1 * c1 + 4.0 * beta * q)) / (2.0 * beta)


def stage_weights(params: VehicleParams, v_ref: float):
    q = 1.0 / v_ref ** 2
    r = np.diag([1.0 / params.e_max ** 2, 1.0 / params.fb_max ** 2])
    return q, r


@dataclass
class ObjectiveEval:
    value: float
    grad: np.ndarray
    hess: np.ndarray = field(repr=False)


def objective(scn: Scenario, i: int, w) -> ObjectiveEval:
    """Tracking cost: speed error at every node, input error on every interval, LQR terminal weight."""
    K = scn.K
    veh = scn.vehicles[i]
    prm, vr = veh.params, veh.v_ref
    q, r = stage_weights(prm, vr)
    qf = lqr_terminal_weight(prm, vr, scn.dt)
    ur = reference_input(prm, vr)
    w = np.asarray(w)
    xs, us = split_w(w, K)
    dv = xs[:, 1] - vr
    du = us - ur
    val = qf * dv[K] ** 2 + q * np.sum(dv * dv) + np.sum(du * du * np.diag(r))
    grad = np.zeros(n_w(K), dtype=w.dtype)
    diag = np.zeros(n_w(K))
    vi = vel_idx(K)
    grad[vi] = 2.0 * q * dv
    diag[vi] = 2.0 * q
    grad[vi[-1]] += 2.0 * qf * dv[K]
    diag[vi[-1]] += 2.0 * qf
    k = np.arange(K)
    for a in range(2):
        grad[4 * k + 2 + a] = 2.0 * r[a, a] * du[:, a]
        diag[4 * k + 2 + a] = 2.0 * r[a, a]
    return ObjectiveEval(float(np.real(val)) if np.isrealobj(val) else val, grad, np.diag(diag))


# ---- initial guess and ordering ----

@dataclass
class PrimalGuess:
    w: list[np.ndarray]
    T: list[np.ndarray]


def _crossing_time(params, xs, us, dt, K, target, vehicle):
    p_end = xs[-1, 0]
    if p_end <= target:
        raise ScenarioError(f"vehicle {vehicle} does not clear position {target} within the horizon")

    def pos(t):
        k = interval_index(t, dt, K)
        return rk4_step(params, xs[k], us[k], t - k * dt).x_next[0, 0] - target

    k_hit = int(np.argmax(xs[:, 0] > target))
    lo, hi = (k_hit - 1) * dt, k_hit * dt
    if pos(lo) == 0.0:
        return lo
    return brentq(pos, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)


def initial_guess(scn: Scenario) -> PrimalGuess:
    """Rollout at the reference input from every initial state plus its crossing times."""
    K, dt = scn.K, scn.dt
    ws, Ts = [], []
    for i, veh in enumerate(scn.vehicles):
        prm = veh.params
        ur = reference_input(prm, veh.v_ref)
        us = np.tile(ur, (K, 1))
        xs = np.empty((K + 1, 2))
        xs[0] = scn.x0(i)
        xs[1:] = 0.0
        for k in range(K):
            xs[k + 1] = rk4_step(prm, xs[k], us[k], dt).x_next[0]
        w = np.empty(n_w(K))
        w[: 4 * K].reshape(K, 4)[:, :2] = xs[:K]
        w[: 4 * K].reshape(K, 4)[:, 2:] = us
        w[4 * K:] = xs[K]
        T = []
        for c in scn.crossings_of(i):
            for target in (c.p_in, c.p_out):
                t = _crossing_time(prm, xs, us, dt, K, target, i)
                if t > K * dt - T_CLIP:
                    raise ScenarioError(f"vehicle {i} does not clear zone {c.cz} within the horizon")
                T.append(t)
        ws.append(w)
        Ts.append(clip_time(np.array(T, dtype=float), K, dt))
    return PrimalGuess(ws, Ts)


def default_crossing_order(scn: Scenario) -> tuple[tuple[int, int, int], ...]:
    """First-come-first-served chain per zone by constant-speed arrival time."""
    zones: dict[int, list[tuple[float, int]]] = {}
    for i, veh in enumerate(scn.vehicles):
        for c in scn.crossings_of(i):
            arrival = (c.p_in - veh.p0) / veh.v0 if veh.v0 > 0 else math.inf
            zones.setdefault(c.cz, []).append((arrival, i))
    triples = []
    for r in sorted(zones):
        seq = [i for _, i in sorted(zones[r])]
        triples.extend((a, b, r) for a, b in zip(seq[:-1], seq[1:]))
    return tuple(triples)
