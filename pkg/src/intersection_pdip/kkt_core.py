"""Partitioned primal-dual residual, per-vehicle KKT blocks and their factorization.

Complementarity rows are stored as s*mu - tau in residuals (used for norms and
termination).  The Newton right-hand side uses the scaled form mu - tau/s so
that every diagonal block keeps the symmetric template

    [[B, Jg^T, Jh^T, 0], [Jg, 0, 0, 0], [Jh, 0, 0, I], [0, 0, I, W]],  W = mu/s.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import lapack

from .problem import Problem, VehicleLayout, apply_CT, gather_coupling
from .reca_param import RecaMode, fit_theta
from .transcription import (
    T_CLIP, clip_time, equality_constraints, initial_guess, objective, path_constraints,
    path_hessian_weights, pos_idx, split_w,
)
from .vehicle_model import interval_index, rk4_step

GN_SHIFT = 1e-8
ZETA_SCHEDULE = (0.0,) + tuple(1e-6 * 100.0 ** j for j in range(7))  # 0, 1e-6, ..., 1e6
COMPLEX_STEP = 1e-30


class ContractViolation(ValueError):
    """Iterate left the interior (some mu or s not strictly positive)."""


class RegularizationFailure(RuntimeError):
    pass


class SingularBlock(RuntimeError):
    pass


# ---- iterate ----

@dataclass
class Iterate:
    """z = (z^v_1..N, z^L_1..L, z^C) as flat per-block vectors plus the barrier parameter."""

    zv: list[np.ndarray]
    zl: list[np.ndarray]
    zc: np.ndarray
    tau: float = 1.0

    def copy(self) -> "Iterate":
        return Iterate([z.copy() for z in self.zv], [z.copy() for z in self.zl], self.zc.copy(), self.tau)

    def flat(self) -> np.ndarray:
        return np.concatenate(self.zv + self.zl + [self.zc])


def central_mu(prob: Problem, zc):
    return zc[: prob.n_C]


def central_s(prob: Problem, zc):
    return zc[prob.n_C:]


def lane_mu_s(prob: Problem, l: int, zl):
    n = prob.lanes[l].n_rows
    return zl[:n], zl[n:]


def initial_iterate(prob: Problem) -> Iterate:
    """Reference-input rollout, lambda = 0, mu = s = 1, tau = 1; theta at the mid-gap of the rollout."""
    scn, K = prob.scenario, prob.K
    guess = initial_guess(scn)
    thetas = {}
    for lane in prob.lanes:
        for m in range(len(lane.vehicles) - 1):
            a, b = lane.vehicles[m], lane.vehicles[m + 1]
            mid = 0.5 * (guess.w[a][pos_idx(K)] + guess.w[b][pos_idx(K)])
            if prob.mode is not RecaMode.EXACT:
                thetas[(lane.l, m)] = fit_theta(mid, K, prob.q)
    zv = []
    for lay in prob.vehicles:
        z = np.zeros(lay.n_z)
        z[lay.sl_w] = guess.w[lay.i]
        z[lay.sl_T] = guess.T[lay.i]
        if prob.mode is RecaMode.DUAL:
            if lay.has_rear:
                z[lay.sl_theta_rear] = thetas[(lay.lane, lay.slot - 1)]
            if lay.has_front:
                z[lay.sl_theta_front] = thetas[(lay.lane, lay.slot)]
        z[lay.sl_mu] = 1.0
        z[lay.sl_s] = 1.0
        zv.append(z)
    zl = []
    for lane in prob.lanes:
        if prob.mode is RecaMode.EXACT:
            zl.append(np.ones(lane.n_z))
        elif prob.mode is RecaMode.PRIMAL:
            zl.append(np.concatenate([thetas[(lane.l, m)] for m in range(len(lane.vehicles) - 1)])
                      if lane.active else np.zeros(0))
        else:
            zl.append(np.zeros(lane.n_z))
    zc = np.ones(2 * prob.n_C)
    return Iterate(zv, zl, zc, 1.0)


# ---- vehicle evaluation ----

@dataclass
class VehicleEval:
    J: float
    grad: np.ndarray       # objective gradient over y
    g: np.ndarray
    Jg: sp.csr_matrix
    h: np.ndarray          # inequality values including lane coupling terms
    Jh: sp.csr_matrix      # w.r.t. y
    r: np.ndarray          # residual, complementarity as s*mu - tau
    obj_hess: np.ndarray = field(repr=False, default=None)  # diagonal over y


def vehicle_inequalities(prob: Problem, lay: VehicleLayout, y) -> tuple[np.ndarray, sp.csr_matrix]:
    """Path rows, the front/rear separation rows (parameterized modes, without lane-owned theta), then horizon rows on T."""
    scn, K = prob.scenario, prob.K
    w = y[lay.sl_w]
    pc = path_constraints(scn, lay.i, w)
    blocks_h = [pc.value]
    P = sp.coo_matrix(pc.jac)
    rows, cols, vals = [P.row], [P.col], [P.data]
    p = w[pos_idx(K)]
    k = np.arange(K + 1)
    R = prob.R

    def add_dense(r0, c0, M):
        rr, cc = np.nonzero(M)
        rows.append(r0 + rr)
        cols.append(c0 + cc)
        vals.append(M[rr, cc])

    if lay.n_front:
        val = p + lay.front_const
        rows.append(lay.sl_front.start + k)
        cols.append(pos_idx(K))
        vals.append(np.ones(K + 1))
        if prob.mode is RecaMode.DUAL:
            val = val - R @ y[lay.sl_theta_front]
            add_dense(lay.sl_front.start, lay.sl_theta_front.start, -R)
        blocks_h.append(val)
    if lay.n_rear:
        val = lay.rear_const - p
        rows.append(lay.sl_rear.start + k)
        cols.append(pos_idx(K))
        vals.append(-np.ones(K + 1))
        if prob.mode is RecaMode.DUAL:
            val = val + R @ y[lay.sl_theta_rear]
            add_dense(lay.sl_rear.start, lay.sl_theta_rear.start, R)
        blocks_h.append(val)
    if lay.n_hor:
        t_hi = K * scn.dt - T_CLIP
        rows.append(lay.sl_hor.start + np.arange(lay.n_hor))
        cols.append(lay.sl_T.start + np.arange(lay.n_T))
        vals.append(np.full(lay.n_T, 1.0 / t_hi))
        blocks_h.append((y[lay.sl_T] - t_hi) / t_hi)
    jac = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                        shape=(lay.n_h, lay.n_y))
    return np.concatenate(blocks_h), jac.tocsr()


def eval_vehicle(prob: Problem, i: int, zv, cL, cC, tau: float) -> VehicleEval:
    """Everything vehicle i can compute locally given its coupling inputs.

    ``cL`` is E_i^T z^L (lane vector pulled into the a_i coupling columns)
    and ``cC`` is C_i^T mu^C.
    """
    lay = prob.vehicles[i]
    scn = prob.scenario
    y, lam, mu, s = zv[lay.sl_y], zv[lay.sl_lam], zv[lay.sl_mu], zv[lay.sl_s]
    if np.any(mu <= 0) or np.any(s <= 0):
        raise ContractViolation(f"vehicle {i}: non-interior iterate")
    ob = objective(scn, i, y[lay.sl_w])
    grad = np.zeros(lay.n_y)
    grad[lay.sl_w] = ob.grad
    hdiag = np.zeros(lay.n_y)
    hdiag[lay.sl_w] = np.diag(ob.hess)
    ge = equality_constraints(scn, i, y[lay.sl_w], y[lay.sl_T])
    Jg = sp.csr_matrix(ge.jac, shape=(lay.n_g, lay.n_y)) if ge.jac.shape[1] == lay.n_y else \
        sp.hstack([sp.csr_matrix(ge.jac), sp.csr_matrix((lay.n_g, lay.n_y - ge.jac.shape[1]))], format="csr")
    h, Jh = vehicle_inequalities(prob, lay, y)

    r = np.empty(lay.n_z)
    r[lay.sl_y] = grad + Jg.T @ lam + Jh.T @ mu
    if lay.a:
        coup = lay.A @ cL
        r[lay.sl_y] += coup[lay.sl_y]
        h = h + coup[lay.sl_mu]
    if lay.n_T:
        r[lay.sl_T] += cC
    r[lay.sl_lam] = ge.value
    r[lay.sl_mu] = h + s
    r[lay.sl_s] = s * mu - tau
    return VehicleEval(ob.value, grad, ge.value, Jg, h, Jh, r, hdiag)


def vehicle_coupling_inputs(prob: Problem, it: Iterate, i: int):
    """Monolithic evaluation of (E_i^T z^L, C_i^T mu^C)."""
    lay = prob.vehicles[i]
    cL = gather_coupling(lay, it.zl[lay.lane]) if lay.a else np.zeros(0)
    cC = apply_CT(prob.C_i(i), central_mu(prob, it.zc)) if lay.n_T else np.zeros(0)
    return cL, cC


def residual_vehicle(prob: Problem, it: Iterate, i: int) -> np.ndarray:
    cL, cC = vehicle_coupling_inputs(prob, it, i)
    return eval_vehicle(prob, i, it.zv[i], cL, cC, it.tau).r


# ---- lane and central evaluation ----

def lane_payload(prob: Problem, i: int, zv) -> np.ndarray:
    """A_i^T z^v_i: positions (exact), theta-gradient of the Lagrangian (primal) or signed theta copies (dual)."""
    lay = prob.vehicles[i]
    return lay.A.T @ zv if lay.a else np.zeros(0)


def lane_primal(prob: Problem, l: int, payloads: dict) -> np.ndarray:
    """Sum of E_i u_i over the lane's vehicles (ascending index) plus constants."""
    lane = prob.lanes[l]
    out = lane.const.copy()
    for i in sorted(lane.vehicles):
        seg_out = np.zeros(lane.n_rows)
        lay = prob.vehicles[i]
        for seg in lay.segments:
            seg_out[seg.lane_offset: seg.lane_offset + seg.length] += seg.sign * payloads[i][seg.local_offset: seg.local_offset + seg.length]
        out += seg_out
    return out


def residual_lane_from(prob: Problem, l: int, zl, payloads: dict, tau: float) -> np.ndarray:
    lane = prob.lanes[l]
    if not lane.active:
        return np.zeros(0)
    prim = lane_primal(prob, l, payloads)
    if prob.mode is RecaMode.EXACT:
        mu, s = lane_mu_s(prob, l, zl)
        if np.any(mu <= 0) or np.any(s <= 0):
            raise ContractViolation(f"lane {l}: non-interior iterate")
        return np.concatenate([prim + s, s * mu - tau])
    return prim


def residual_lane(prob: Problem, it: Iterate, l: int) -> np.ndarray:
    lane = prob.lanes[l]
    payloads = {i: lane_payload(prob, i, it.zv[i]) for i in lane.vehicles}
    return residual_lane_from(prob, l, it.zl[l], payloads, it.tau)


def central_primal(prob: Problem, T_list: dict) -> np.ndarray:
    out = np.zeros(prob.n_C)
    for i in range(prob.n_vehicles):
        if prob.vehicles[i].n_T:
            out += prob.C_i(i) @ T_list[i]
    return out


def residual_central_from(prob: Problem, zc, T_list: dict, tau: float) -> np.ndarray:
    mu, s = central_mu(prob, zc), central_s(prob, zc)
    if np.any(mu <= 0) or np.any(s <= 0):
        raise ContractViolation("central: non-interior iterate")
    return np.concatenate([central_primal(prob, T_list) + s, s * mu - tau])


def residual_central(prob: Problem, it: Iterate) -> np.ndarray:
    T_list = {lay.i: it.zv[lay.i][lay.sl_T] for lay in prob.vehicles}
    return residual_central_from(prob, it.zc, T_list, it.tau)


@dataclass
class ResidualPartition:
    rv: list[np.ndarray]
    rl: list[np.ndarray]
    rc: np.ndarray
    norms_v: list[float] = field(default_factory=list)
    norms_l: list[float] = field(default_factory=list)
    norm_c: float = 0.0

    def __post_init__(self):
        inf = lambda r: float(np.max(np.abs(r))) if r.size else 0.0
        self.norms_v = [inf(r) for r in self.rv]
        self.norms_l = [inf(r) for r in self.rl]
        self.norm_c = inf(self.rc)


def residual_norm(part: ResidualPartition) -> tuple[float, dict]:
    """Nested max in the fixed order vehicles, lanes, central."""
    mv = max(part.norms_v, default=0.0)
    ml = max(part.norms_l, default=0.0)
    total = max(mv, ml, part.norm_c)
    return total, {"vehicles": mv, "lanes": ml, "central": part.norm_c}


def residual_partition(prob: Problem, it: Iterate) -> ResidualPartition:
    return ResidualPartition(
        [residual_vehicle(prob, it, i) for i in range(prob.n_vehicles)],
        [residual_lane(prob, it, l) for l in range(prob.n_lanes)],
        residual_central(prob, it),
    )


def newton_rhs(r: np.ndarray, comp: slice, s: np.ndarray) -> np.ndarray:
    """Replace complementarity rows s*mu - tau by (s*mu - tau)/s."""
    out = r.copy()
    out[comp] = r[comp] / s
    return out


# ---- exact Lagrangian Hessian ----

def lagrangian_hessian(prob: Problem, i: int, y, lam, mu) -> np.ndarray:
    """Exact Hessian of J + lam^T g + mu^T h over y.

    Second derivatives of the RK4 map come from complex-step differentiation
    of the analytic first derivatives, one coordinate per interval at a time.
    """
    lay = prob.vehicles[i]
    scn, K, dt = prob.scenario, prob.K, prob.scenario.dt
    params = scn.vehicles[i].params
    w = y[lay.sl_w]
    xs, us = split_w(w, K)
    H = np.zeros((lay.n_y, lay.n_y))
    ob = objective(scn, i, w)
    H[lay.sl_w, lay.sl_w] = ob.hess

    lam_def = lam[2: 2 * (K + 1)].reshape(K, 2)
    base = np.hstack([xs[:K], us]).astype(complex)
    blocks = np.empty((K, 4, 4))
    for c in range(4):
        pert = base.copy()
        pert[:, c] += 1j * COMPLEX_STEP
        st = rk4_step(params, pert[:, :2], pert[:, 2:], dt)
        gx = -np.einsum("nab,na->nb", st.jac_x, lam_def)
        gu = -np.einsum("nab,na->nb", st.jac_u, lam_def)
        blocks[:, :, c] = np.hstack([gx, gu]).imag / COMPLEX_STEP
    for k in range(K):
        H[4 * k: 4 * k + 4, 4 * k: 4 * k + 4] += blocks[k]

    row = 2 * (K + 1)
    T = y[lay.sl_T]
    for j in range(lay.n_T):
        t = float(T[j])
        k = interval_index(t, dt, K)
        var = np.concatenate([xs[k], us[k], [t - k * dt]]).astype(complex)
        blk = np.empty((5, 5))
        for c in range(5):
            pv = var.copy()
            pv[c] += 1j * COMPLEX_STEP
            st = rk4_step(params, pv[:2], pv[2:4], pv[4])
            grad = np.concatenate([st.jac_x[0, 0], st.jac_u[0, 0], [st.d_h[0, 0]]])
            blk[:, c] = lam[row + j] * grad.imag / COMPLEX_STEP
        idx = np.r_[4 * k: 4 * k + 4, lay.n_w + j]
        H[np.ix_(idx, idx)] += blk

    kk, wts = path_hessian_weights(scn, i, mu[: lay.n_path])
    H[4 * kk + 1, 4 * kk + 2] += wts
    H[4 * kk + 2, 4 * kk + 1] += wts
    return 0.5 * (H + H.T)


# ---- factorization ----

def _inertia(lu: np.ndarray, ipiv: np.ndarray) -> tuple[int, int, int]:
    n = lu.shape[0]
    pos = neg = zero = 0
    k = 0
    tol = 0.0
    while k < n:
        if ipiv[k] > 0:
            d = lu[k, k]
            pos += d > tol
            neg += d < -tol
            zero += d == 0
            k += 1
        else:
            a, b, c = lu[k, k], lu[k + 1, k], lu[k + 1, k + 1]
            det = a * c - b * b
            if det < 0:
                pos += 1
                neg += 1
            elif det > 0:
                if a + c > 0:
                    pos += 2
                else:
                    neg += 2
            else:
                zero += 1
                pos += (a + c) > 0
                neg += (a + c) < 0
            k += 2
    return int(pos), int(neg), int(zero)


class CondensedFactor:
    """Exact solver for the vehicle block by eliminating (mu, s).

    For right-hand side (b1, b2, b3, b4) over (y, lambda, mu, s):
    ds = b3 - Jh dy, dmu = b4 - W b3 + W Jh dy and
    [[B + Jh^T W Jh, Jg^T], [Jg, 0]] [dy; dlam] = [b1 - Jh^T (b4 - W b3); b2],
    factored by a symmetric indefinite (Bunch-Kaufman) factorization.
    """

    def __init__(self, B: np.ndarray, Jg: sp.csr_matrix, Jh: sp.csr_matrix, W: np.ndarray):
        self.n_y, self.n_g, self.n_h = B.shape[0], Jg.shape[0], Jh.shape[0]
        self.Jh, self.W = Jh, W
        Hc = B + (Jh.T @ sp.diags(W) @ Jh).toarray()
        Kc = np.zeros((self.n_y + self.n_g,) * 2)
        Kc[: self.n_y, : self.n_y] = Hc
        Jgd = Jg.toarray()
        Kc[self.n_y:, : self.n_y] = Jgd
        Kc[: self.n_y, self.n_y:] = Jgd.T
        lu, ipiv, info = lapack.dsytrf(Kc, lower=1)
        if info < 0:
            raise SingularBlock(f"dsytrf argument error {info}")
        self.lu, self.ipiv = lu, ipiv
        self.inertia = _inertia(lu, ipiv)
        self.singular = info > 0 or self.inertia[2] > 0

    def solve(self, b: np.ndarray) -> np.ndarray:
        if self.singular:
            raise SingularBlock("vehicle block is singular")
        one = b.ndim == 1
        B = b[:, None] if one else b
        ny, ng, nh = self.n_y, self.n_g, self.n_h
        b1, b2 = B[:ny], B[ny: ny + ng]
        b3, b4 = B[ny + ng: ny + ng + nh], B[ny + ng + nh:]
        t = b4 - self.W[:, None] * b3
        rhs = np.vstack([b1 - self.Jh.T @ t, b2])
        sol, info = lapack.dsytrs(self.lu, self.ipiv, rhs, lower=1)
        if info != 0:
            raise SingularBlock(f"dsytrs failed with info={info}")
        dy = sol[:ny]
        Jdy = self.Jh @ dy
        ds = b3 - Jdy
        dmu = t + self.W[:, None] * Jdy
        out = np.vstack([dy, sol[ny:], dmu, ds])
        return out[:, 0] if one else out


def regularize_vehicle_hessian(B, Jg, mode: str, Jh=None, W=None):
    """Return (B', zeta, factor).

    gauss_newton: B + 1e-8 I.  exact_with_inertia: B + zeta I with zeta
    escalated through 0, 1e-6, 1e-4, ... (x100) until the condensed matrix has
    n_y positive and n_g negative eigenvalues.
    """
    n_y = B.shape[0]
    if Jg is None:
        Jg = sp.csr_matrix((0, n_y))
    if Jh is None:
        Jh = sp.csr_matrix((0, n_y))
        W = np.zeros(0)
    Jg, Jh = sp.csr_matrix(Jg), sp.csr_matrix(Jh)
    eye = np.eye(n_y)
    if mode == "gauss_newton":
        Bp = B + GN_SHIFT * eye
        return Bp, GN_SHIFT, CondensedFactor(Bp, Jg, Jh, W)
    if mode != "exact_with_inertia":
        raise ValueError(f"unknown hessian mode {mode!r}")
    for zeta in ZETA_SCHEDULE:
        Bp = B + zeta * eye
        f = CondensedFactor(Bp, Jg, Jh, W)
        if f.inertia == (n_y, Jg.shape[0], 0):
            return Bp, zeta, f
    raise RegularizationFailure(f"inertia correction exceeded zeta={ZETA_SCHEDULE[-1]:g}")


@dataclass
class VehicleKktBlock:
    i: int
    B: np.ndarray = field(repr=False)
    Jg: sp.csr_matrix = field(repr=False)
    Jh: sp.csr_matrix = field(repr=False)
    W: np.ndarray = field(repr=False)
    factor: CondensedFactor = field(repr=False)
    zeta: float
    ev: VehicleEval = field(repr=False)
    rhs: np.ndarray = field(repr=False)  # Newton right-hand side form of the residual

    def matvec(self, x: np.ndarray) -> np.ndarray:
        """M^v_i x using the block template."""
        ny, ng, nh = self.B.shape[0], self.Jg.shape[0], self.Jh.shape[0]
        dy, dl = x[:ny], x[ny: ny + ng]
        dm, ds = x[ny + ng: ny + ng + nh], x[ny + ng + nh:]
        return np.concatenate([
            self.B @ dy + self.Jg.T @ dl + self.Jh.T @ dm,
            self.Jg @ dy,
            self.Jh @ dy + ds,
            dm + self.W * ds,
        ])

    def dense(self) -> np.ndarray:
        ny, ng, nh = self.B.shape[0], self.Jg.shape[0], self.Jh.shape[0]
        n = ny + ng + 2 * nh
        M = np.zeros((n, n))
        Jg, Jh = self.Jg.toarray(), self.Jh.toarray()
        M[:ny, :ny] = self.B
        M[:ny, ny: ny + ng] = Jg.T
        M[ny: ny + ng, :ny] = Jg
        M[:ny, ny + ng: ny + ng + nh] = Jh.T
        M[ny + ng: ny + ng + nh, :ny] = Jh
        o = ny + ng
        idx = np.arange(nh)
        M[o + idx, o + nh + idx] = 1.0
        M[o + nh + idx, o + idx] = 1.0
        M[o + nh + idx, o + nh + idx] = self.W
        return M


def assemble_vehicle_block(prob: Problem, i: int, zv, cL, cC, tau: float,
                           hessian_mode: str = "gauss_newton", extra_shift: float = 0.0) -> VehicleKktBlock:
    """Evaluate, regularize and factor vehicle i's block from local data only."""
    lay = prob.vehicles[i]
    ev = eval_vehicle(prob, i, zv, cL, cC, tau)
    mu, s = zv[lay.sl_mu], zv[lay.sl_s]
    W = mu / s
    if hessian_mode == "gauss_newton":
        B = np.diag(ev.obj_hess)
    else:
        B = lagrangian_hessian(prob, i, zv[lay.sl_y], zv[lay.sl_lam], mu)
    if extra_shift:
        B = B + extra_shift * np.eye(lay.n_y)
    Bp, zeta, fac = regularize_vehicle_hessian(B, ev.Jg, hessian_mode, ev.Jh, W)
    if fac.singular:
        raise SingularBlock(f"vehicle {i}: block singular after regularization (inertia {fac.inertia})")
    rhs = newton_rhs(ev.r, lay.sl_s, s)
    return VehicleKktBlock(i, Bp, ev.Jg, ev.Jh, W, fac, zeta + extra_shift, ev, rhs)


def vehicle_T(prob: Problem, i: int, zv) -> np.ndarray:
    return zv[prob.vehicles[i].sl_T]


def clip_vehicle_times(prob: Problem, i: int, zv) -> None:
    lay = prob.vehicles[i]
    zv[lay.sl_T] = clip_time(zv[lay.sl_T], prob.K, prob.scenario.dt)
