"""Hierarchical solution of the partitioned KKT system.

Vehicles are eliminated into their lane node, lanes into the central node.
With A_i the vehicle's coupling columns, E_i its segment map into the lane
vector and Q_i the selector of its crossing times:

    D_i = A_i^T M_i^-1 A_i,  d_i = A_i^T M_i^-1 r_i,  X_i = A_i^T M_i^-1 Q_i^T,
    M̄^L = M^L - sum E_i D_i E_i^T,  r̄^L = r^L - sum E_i d_i,  G_l = [E_i X_i],
    H_l = G_l^T (M̄^L)^-1 G_l,  h_l = G_l^T (M̄^L)^-1 r̄^L,
    (M̄^C - sum_l C_l H_l C_l^T) dz^C = -r̄^C - sum_l C_l h_l,
    M̄^L dz^L = -r̄^L + G_l C_l^T dmu^C,
    M_i dz^v_i = -r_i - A_i E_i^T dz^L - Q_i^T C_i^T dmu^C.

All sums run in ascending vehicle/lane index order.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lapack

from .kkt_core import (
    Iterate, SingularBlock, VehicleKktBlock, _inertia, central_mu, central_s, lane_mu_s, newton_rhs,
    residual_central, residual_lane,
)
from .problem import (
    Problem, apply_CT, gather_coupling, scatter_coupling, scatter_coupling_matrix, scatter_coupling_rows,
    segment_slices, sym_from_lower,
)
from .reca_param import RecaMode


class SymFactor:
    """Symmetric indefinite factorization with repeated solves."""

    def __init__(self, M: np.ndarray, what: str = "matrix"):
        self.n = M.shape[0]
        if self.n == 0:
            self.lu = M
            self.ipiv = np.zeros(0, dtype=np.int32)
            self.inertia = (0, 0, 0)
            return
        lu, ipiv, info = lapack.dsytrf(M, lower=1)
        self.lu, self.ipiv = lu, ipiv
        self.inertia = _inertia(lu, ipiv)
        if info != 0 or self.inertia[2]:
            raise SingularBlock(f"{what} is singular (info={info}, inertia={self.inertia})")

    def solve(self, b: np.ndarray) -> np.ndarray:
        if self.n == 0:
            return np.zeros_like(b, dtype=float)
        one = b.ndim == 1
        B = b[:, None] if one else b
        x, info = lapack.dsytrs(self.lu, self.ipiv, B, lower=1)
        if info != 0:
            raise SingularBlock(f"dsytrs failed with info={info}")
        return x[:, 0] if one else x


# ---- data passed upward ----

@dataclass
class VehicleContribution:
    """What vehicle i uploads: lane part (D, d, X, u) and central part (DTT, dT, T)."""

    i: int
    D: np.ndarray
    d: np.ndarray
    X: np.ndarray
    u: np.ndarray
    DTT: np.ndarray
    dT: np.ndarray
    T: np.ndarray


@dataclass
class LaneCondensed:
    l: int
    Mbar: np.ndarray = field(repr=False)
    factor: SymFactor = field(repr=False)
    rbar: np.ndarray = field(repr=False)
    G: np.ndarray = field(repr=False)
    H: np.ndarray = field(repr=False)
    hvec: np.ndarray = field(repr=False)


@dataclass
class StepDirection:
    dzv: list[np.ndarray]
    dzl: list[np.ndarray]
    dzc: np.ndarray
    dmu_CL: list[np.ndarray]       # C_l^T dmu^C per lane
    dmu_Cv: list[np.ndarray]       # C_i^T dmu^C per vehicle
    dmu_Lv: list[list[np.ndarray]]  # raw lane segment slices per vehicle

    def flat(self) -> np.ndarray:
        return np.concatenate(self.dzv + self.dzl + [self.dzc])

    def scaled(self, c: float) -> "StepDirection":
        return StepDirection([c * v for v in self.dzv], [c * v for v in self.dzl], c * self.dzc,
                             [c * v for v in self.dmu_CL], [c * v for v in self.dmu_Cv],
                             [[c * s for s in sl] for sl in self.dmu_Lv])


# ---- vehicle level ----

def vehicle_condense(prob: Problem, block: VehicleKktBlock, zv: np.ndarray) -> VehicleContribution:
    """Multi-rhs solve against the stored factorization: [A_i | Q_i^T | r_i]."""
    lay = prob.vehicles[block.i]
    a, nT = lay.a, lay.n_T
    rhs = np.zeros((lay.n_z, a + nT + 1))
    if a:
        rhs[:, :a] = lay.A
    rhs[lay.sl_T.start + np.arange(nT), a + np.arange(nT)] = 1.0
    rhs[:, -1] = block.rhs
    sol = block.factor.solve(rhs)
    At = lay.A.T if a else np.zeros((0, lay.n_z))
    D = sym_from_lower(At @ sol[:, :a])
    X = At @ sol[:, a: a + nT]
    d = At @ sol[:, -1]
    solT = sol[lay.sl_T]
    DTT = sym_from_lower(solT[:, a: a + nT])
    dT = solT[:, -1].copy()
    u = At @ zv
    return VehicleContribution(block.i, D, d, X, u, DTT, dT, zv[lay.sl_T].copy())


def vehicle_solve(prob: Problem, block: VehicleKktBlock, lane_slices, dmu_Cv) -> np.ndarray:
    """Back-substitution: M_i dz = -r_i - A_i E_i^T dz^L - Q_i^T C_i^T dmu^C."""
    lay = prob.vehicles[block.i]
    rhs = -block.rhs
    if lay.a:
        rhs = rhs - lay.A @ gather_coupling(lay, lane_slices)
    if lay.n_T:
        rhs[lay.sl_T] -= dmu_Cv
    return block.factor.solve(rhs)


# ---- lane level ----

def lane_newton_rhs(prob: Problem, l: int, zl: np.ndarray, rl: np.ndarray) -> np.ndarray:
    if prob.mode is RecaMode.EXACT and prob.lanes[l].active:
        n = prob.lanes[l].n_rows
        return newton_rhs(rl, slice(n, 2 * n), zl[n:])
    return rl.copy()


def lane_condense(prob: Problem, l: int, contribs: dict, zl: np.ndarray, rl_newton: np.ndarray) -> LaneCondensed:
    """Schur complement of the lane block after eliminating its vehicles."""
    lane = prob.lanes[l]
    if not lane.active:
        z = np.zeros((0, 0))
        return LaneCondensed(l, z, SymFactor(z), np.zeros(0), np.zeros((0, 0)), np.zeros((0, 0)), np.zeros(0))
    mu_s = lane_mu_s(prob, l, zl) if prob.mode is RecaMode.EXACT else None
    Mbar = prob.lane_matrix(l, mu_s)
    rbar = rl_newton.copy()
    G = np.zeros((lane.n_z, lane.n_TL))
    for i in sorted(lane.vehicles):
        lay = prob.vehicles[i]
        c = contribs[i]
        scatter_coupling_matrix(lay, c.D, Mbar, -1.0)
        tmp = np.zeros(lane.n_z)
        scatter_coupling(lay, c.d, tmp)
        rbar -= tmp
        if lay.n_T:
            off = lane.T_local[i]
            scatter_coupling_rows(lay, c.X, G, slice(off, off + lay.n_T))
    fac = SymFactor(Mbar, f"lane {l} Schur block")
    if lane.n_TL:
        Y = fac.solve(np.hstack([G, rbar[:, None]]))
        H = sym_from_lower(G.T @ Y[:, :-1])
        hvec = G.T @ Y[:, -1]
    else:
        H, hvec = np.zeros((0, 0)), np.zeros(0)
    return LaneCondensed(l, Mbar, fac, rbar, G, H, hvec)


def lane_solve(lc: LaneCondensed, dmu_CL: np.ndarray) -> np.ndarray:
    if lc.Mbar.shape[0] == 0:
        return np.zeros(0)
    rhs = -lc.rbar
    if lc.G.shape[1]:
        rhs = rhs + lc.G @ dmu_CL
    return lc.factor.solve(rhs)


# ---- central level ----

def central_newton_rhs(prob: Problem, zc: np.ndarray, rc: np.ndarray) -> np.ndarray:
    n = prob.n_C
    return newton_rhs(rc, slice(n, 2 * n), central_s(prob, zc))


def central_matrix(prob: Problem, zc: np.ndarray, contribs: dict, lanes: dict):
    """Reduced central matrix and right-hand-side correction."""
    n = prob.n_C
    mu, s = central_mu(prob, zc), central_s(prob, zc)
    M = np.zeros((2 * n, 2 * n))
    idx = np.arange(n)
    M[idx, n + idx] = 1.0
    M[n + idx, idx] = 1.0
    M[n + idx, n + idx] = mu / s
    S = np.zeros((n, n))
    corr = np.zeros(2 * n)
    for i in range(prob.n_vehicles):
        if prob.vehicles[i].n_T == 0:
            continue
        Ci = prob.C_i(i)
        S += Ci @ contribs[i].DTT @ Ci.T
        corr[:n] -= Ci @ contribs[i].dT
    for l in range(prob.n_lanes):
        lane = prob.lanes[l]
        if not lane.active or lane.n_TL == 0:
            continue
        Cl = prob.C[:, lane.T_cols]
        S += Cl @ lanes[l].H @ Cl.T
        corr[:n] += Cl @ lanes[l].hvec
    M[:n, :n] -= S
    return M, corr


def central_solve(prob: Problem, zc: np.ndarray, rc_newton: np.ndarray, contribs: dict, lanes: dict) -> np.ndarray:
    if prob.n_C == 0:
        return np.zeros(0)
    M, corr = central_matrix(prob, zc, contribs, lanes)
    fac = SymFactor(M, "central Schur block")
    return fac.solve(-(rc_newton + corr))


# ---- orchestration ----

def search_direction(prob: Problem, it: Iterate, blocks: list[VehicleKktBlock]) -> StepDirection:
    """Condense vehicles, condense lanes, solve centrally, then back-substitute through lanes and vehicles."""
    contribs = {b.i: vehicle_condense(prob, b, it.zv[b.i]) for b in blocks}
    lanes = {}
    for l in range(prob.n_lanes):
        rl = lane_newton_rhs(prob, l, it.zl[l], residual_lane(prob, it, l))
        lanes[l] = lane_condense(prob, l, contribs, it.zl[l], rl)
    rc = central_newton_rhs(prob, it.zc, residual_central(prob, it))
    dzc = central_solve(prob, it.zc, rc, contribs, lanes)
    dmu_c = dzc[: prob.n_C]
    dmu_CL, dzl = [], []
    for l in range(prob.n_lanes):
        lane = prob.lanes[l]
        sl = apply_CT(prob.C[:, lane.T_cols], dmu_c) if lane.n_TL else np.zeros(0)
        dmu_CL.append(sl)
        dzl.append(lane_solve(lanes[l], sl))
    dzv, dmu_Cv, dmu_Lv = [], [], []
    for b in blocks:
        lay = prob.vehicles[b.i]
        cv = apply_CT(prob.C_i(b.i), dmu_c) if lay.n_T else np.zeros(0)
        slices = segment_slices(lay, dzl[lay.lane]) if lay.a else []
        dmu_Cv.append(cv)
        dmu_Lv.append(slices)
        dzv.append(vehicle_solve(prob, b, slices, cv))
    return StepDirection(dzv, dzl, dzc, dmu_CL, dmu_Cv, dmu_Lv)
