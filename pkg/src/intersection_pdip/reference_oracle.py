"""Dense centralized ground truth for the partitioned KKT system and the PDIP loop.

The coupling between vehicles, lanes and the central node is rebuilt here
directly from the scenario definitions (gap rows, ordering triples and rho
weights) instead of through the segment maps, so agreement with the
hierarchical path is a meaningful check.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kkt_core import (
    Iterate, assemble_vehicle_block, eval_vehicle, initial_iterate, vehicle_coupling_inputs,
)
from .pdip_solver import (
    IterRecord, SolveReport, SolveResult, SolverConfig,
    alpha_max_horizon, barrier_update, shifts_above, terminate, update_damping,
)
from .problem import Problem
from .reca_param import RecaMode, rho_weights
from .transcription import clip_time, objective

MAX_DENSE_DIM = 30000


class OracleTooLarge(ValueError):
    pass


@dataclass
class DenseKkt:
    M: np.ndarray = field(repr=False)
    r: np.ndarray = field(repr=False)        # Newton right-hand side form
    r_prod: np.ndarray = field(repr=False)   # complementarity rows as s*mu - tau
    index: dict = field(repr=False)

    @property
    def dim(self) -> int:
        return self.M.shape[0]


def block_index(prob: Problem) -> dict:
    """Global ranges: vehicles, then lanes, then the central block."""
    idx, off = {"v": [], "l": [], "c": None}, 0
    for lay in prob.vehicles:
        idx["v"].append(slice(off, off + lay.n_z))
        off += lay.n_z
    for lane in prob.lanes:
        idx["l"].append(slice(off, off + lane.n_z))
        off += lane.n_z
    idx["c"] = slice(off, off + 2 * prob.n_C)
    idx["n"] = off + 2 * prob.n_C
    return idx


def _couplings(prob: Problem):
    """Symmetric coupling entries (vehicle row, lane/central column, value) from the raw definitions."""
    scn, K = prob.scenario, prob.K
    idx = block_index(prob)
    ent = []
    for l, lane in enumerate(scn.lanes):
        base = idx["l"][l].start
        for m in range(len(lane) - 1):
            fol, lead = lane[m], lane[m + 1]
            lf, ll = prob.vehicles[fol], prob.vehicles[lead]
            of, ol = idx["v"][fol].start, idx["v"][lead].start
            for k in range(K + 1):
                if prob.mode is RecaMode.EXACT:
                    col = base + m * (K + 1) + k
                    ent.append((of + 4 * k, col, 1.0))
                    ent.append((ol + 4 * k, col, -1.0))
                elif prob.mode is RecaMode.PRIMAL:
                    w = rho_weights(k, K, prob.q, prob.rho_literal)
                    for j in range(prob.q):
                        col = base + m * prob.q + j
                        if w[j] != 0.0:
                            ent.append((of + lf.n_y + lf.n_g + lf.sl_front.start + k, col, -w[j]))
                            ent.append((ol + ll.n_y + ll.n_g + ll.sl_rear.start + k, col, w[j]))
            if prob.mode is RecaMode.DUAL:
                for j in range(prob.q):
                    col = base + m * prob.q + j
                    ent.append((of + lf.sl_theta_front.start + j, col, 1.0))
                    ent.append((ol + ll.sl_theta_rear.start + j, col, -1.0))
    cb = idx["c"].start
    for row, (i, j, r) in enumerate(scn.order):
        li, lj = prob.vehicles[i], prob.vehicles[j]
        ent.append((idx["v"][i].start + li.n_w + scn.t_index(i, r, "out"), cb + row, 1.0))
        ent.append((idx["v"][j].start + lj.n_w + scn.t_index(j, r, "in"), cb + row, -1.0))
    return ent


def dense_residual(prob: Problem, it: Iterate) -> tuple[np.ndarray, np.ndarray]:
    """Full residual in product form and in Newton form, built from global vectors."""
    scn, K = prob.scenario, prob.K
    idx = block_index(prob)
    z = it.flat()
    r = np.zeros(idx["n"])
    for lay in prob.vehicles:
        zero_L = np.zeros(lay.a)
        zero_C = np.zeros(lay.n_T)
        r[idx["v"][lay.i]] = eval_vehicle(prob, lay.i, it.zv[lay.i], zero_L, zero_C, it.tau).r
    # coupling terms: r_row += value * z_col (vehicle stationarity / primal-mode h rows),
    # r_col += value * z_row (lane / central primal rows)
    for row, col, val in _couplings(prob):
        r[row] += val * z[col]
        r[col] += val * z[row]
    for l, lane in enumerate(scn.lanes):
        sl = idx["l"][l]
        if prob.mode is RecaMode.EXACT and len(lane) > 1:
            n = prob.lanes[l].n_rows
            mu, s = z[sl][:n], z[sl][n:]
            deltas = np.repeat([scn.vehicles[lane[m]].params.delta for m in range(len(lane) - 1)], K + 1)
            r[sl.start: sl.start + n] += deltas + s
            r[sl.start + n: sl.stop] = s * mu - it.tau
    n = prob.n_C
    cs = idx["c"]
    mu_c, s_c = z[cs][:n], z[cs][n:]
    r[cs.start: cs.start + n] += s_c
    r[cs.start + n: cs.stop] = s_c * mu_c - it.tau
    # primal-mode h rows carry delta/2 and -p already from eval_vehicle; theta terms came from couplings
    rn = r.copy()
    for g in comp_groups(prob):
        rn[g["comp"]] = r[g["comp"]] / z[g["s"]]
    return r, rn


def comp_groups(prob: Problem) -> list[dict]:
    """Global index arrays for every (mu, s) group with its complementarity and primal rows."""
    idx = block_index(prob)
    out = []
    for lay in prob.vehicles:
        o = idx["v"][lay.i].start
        out.append({"mu": o + np.arange(lay.sl_mu.start, lay.sl_mu.stop),
                    "s": o + np.arange(lay.sl_s.start, lay.sl_s.stop),
                    "comp": o + np.arange(lay.sl_s.start, lay.sl_s.stop),
                    "prim": o + np.arange(lay.sl_mu.start, lay.sl_mu.stop)})
    for l, lane in enumerate(prob.lanes):
        if prob.lane_has_bounds(l):
            o, n = idx["l"][l].start, lane.n_rows
            out.append({"mu": o + np.arange(n), "s": o + n + np.arange(n),
                        "comp": o + n + np.arange(n), "prim": o + np.arange(n)})
    if prob.n_C:
        o, n = idx["c"].start, prob.n_C
        out.append({"mu": o + np.arange(n), "s": o + n + np.arange(n),
                    "comp": o + n + np.arange(n), "prim": o + np.arange(n)})
    return out


def assemble_dense(prob: Problem, it: Iterate, hessian_mode: str = "gauss_newton", shift: float = 0.0,
                   blocks=None) -> DenseKkt:
    """Full KKT matrix and residual in the vehicles / lanes / central layout."""
    idx = block_index(prob)
    n = idx["n"]
    if n > MAX_DENSE_DIM:
        raise OracleTooLarge(f"dense KKT dimension {n} exceeds {MAX_DENSE_DIM}")
    M = np.zeros((n, n))
    if blocks is None:
        blocks = [assemble_vehicle_block(prob, lay.i, it.zv[lay.i], np.zeros(lay.a), np.zeros(lay.n_T), it.tau,
                                         hessian_mode, shift) for lay in prob.vehicles]
    for b in blocks:
        sl = idx["v"][b.i]
        M[sl, sl] = b.dense()
    for row, col, val in _couplings(prob):
        M[row, col] += val
        M[col, row] += val
    z = it.flat()
    for l, lane in enumerate(prob.lanes):
        sl = idx["l"][l]
        if prob.lane_has_bounds(l):
            m = lane.n_rows
            o = sl.start
            for k in range(m):
                M[o + k, o + m + k] = 1.0
                M[o + m + k, o + k] = 1.0
                M[o + m + k, o + m + k] = z[o + k] / z[o + m + k]
        elif prob.mode is RecaMode.PRIMAL and lane.active:
            from .problem import LANE_THETA_REG
            M[sl, sl] += LANE_THETA_REG * np.eye(lane.n_z)
    nc = prob.n_C
    o = idx["c"].start
    for k in range(nc):
        M[o + k, o + nc + k] = 1.0
        M[o + nc + k, o + k] = 1.0
        M[o + nc + k, o + nc + k] = z[o + k] / z[o + nc + k]
    r_prod, r_newton = dense_residual(prob, it)
    return DenseKkt(M, r_newton, r_prod, idx)


def dense_solve(kkt: DenseKkt) -> np.ndarray:
    """Partial-pivoting LU solve of M dz = -r."""
    if kkt.dim == 0:
        return np.zeros(0)
    return np.linalg.solve(kkt.M, -kkt.r)


def split_direction(prob: Problem, dz: np.ndarray):
    idx = block_index(prob)
    return ([dz[s] for s in idx["v"]], [dz[s] for s in idx["l"]], dz[idx["c"]])


def random_interior_iterate(prob: Problem, rng: np.random.Generator, tau: float = 0.3,
                            spread: float = 1.0) -> Iterate:
    """Initial primal guess perturbed by ``spread``, random positive (mu, s) pairs and random lambda."""
    it = initial_iterate(prob)
    for z, lay in zip(it.zv, prob.vehicles):
        z[lay.sl_w] += spread * rng.normal(scale=0.1, size=lay.n_w)
        z[lay.sl_lam] = rng.normal(size=lay.n_g)
        z[lay.sl_mu] = rng.uniform(0.5, 2.0, lay.n_h)
        z[lay.sl_s] = rng.uniform(0.5, 2.0, lay.n_h)
    for l in range(len(it.zl)):
        it.zl[l] = it.zl[l] + rng.uniform(0.1, 0.5, it.zl[l].size)
    it.zc = rng.uniform(0.5, 2.0, it.zc.size)
    it.tau = tau
    return it


def direction_error(prob: Problem, it: Iterate, hessian_mode: str = "gauss_newton") -> float:
    """Relative inf-norm gap between the hierarchical direction and the dense solve."""
    from .hier_linalg import search_direction
    blocks = [assemble_vehicle_block(prob, lay.i, it.zv[lay.i], *vehicle_coupling_inputs(prob, it, lay.i), it.tau,
                                     hessian_mode) for lay in prob.vehicles]
    hier = search_direction(prob, it, blocks).flat()
    dense = dense_solve(assemble_dense(prob, it, hessian_mode, blocks=blocks))
    scale = max(float(np.max(np.abs(dense), initial=0.0)), 1e-300)
    return float(np.max(np.abs(hier - dense), initial=0.0)) / scale


def finite_difference_jacobian(fun, x, step: float = 1e-5) -> np.ndarray:
    """Central differences of a vector function; columns follow the entries of x."""
    if not step > 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=float)
    f0 = np.atleast_1d(np.asarray(fun(x), dtype=float))
    J = np.empty((f0.size, x.size))
    for j in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[j] += step
        xm[j] -= step
        J[:, j] = (np.atleast_1d(fun(xp)) - np.atleast_1d(fun(xm))) / (2.0 * step)
    return J


# ---- monolithic PDIP on global vectors ----

def _global_sets(prob: Problem):
    idx = block_index(prob)
    groups = comp_groups(prob)
    mult = [g["mu"] for g in groups]
    viol = [g["prim"] for g in groups]
    for lay in prob.vehicles:
        o = idx["v"][lay.i].start
        mult.append(o + np.arange(lay.sl_lam.start, lay.sl_lam.stop))
        viol.append(o + np.arange(lay.sl_lam.start, lay.sl_lam.stop))
    if prob.mode is RecaMode.DUAL:
        for l, lane in enumerate(prob.lanes):
            mult.append(np.arange(idx["l"][l].start, idx["l"][l].stop))
            viol.append(np.arange(idx["l"][l].start, idx["l"][l].stop))
    cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0, dtype=int)
    return {
        "mu": cat([g["mu"] for g in groups]), "s": cat([g["s"] for g in groups]),
        "mult": cat(mult), "viol": cat(viol),
        "T": cat([idx["v"][lay.i].start + np.arange(lay.sl_T.start, lay.sl_T.stop) for lay in prob.vehicles]),
        "w": [(idx["v"][lay.i].start, lay) for lay in prob.vehicles],
    }


def _to_iterate(prob: Problem, z: np.ndarray, tau: float) -> Iterate:
    zv, zl, zc = split_direction(prob, z)
    return Iterate([v.copy() for v in zv], [v.copy() for v in zl], zc.copy(), tau)


def centralized_pdip(prob: Problem, config: SolverConfig | None = None, keep_trace: bool = True) -> SolveResult:
    """Same algorithmic rules as pdip_solver.solve, with dense linear algebra and global vector operations."""
    config = config or SolverConfig()
    it0 = initial_iterate(prob)
    sets = _global_sets(prob)
    z = it0.flat()
    tau = config.tau0
    scn, K, dt = prob.scenario, prob.K, prob.scenario.dt
    report = SolveReport()
    trace = []
    nu = 0.0
    damp = 0.0

    def clip(zz):
        zz[sets["T"]] = clip_time(zz[sets["T"]], K, dt)
        return zz

    def phi(zz, t):
        it = _to_iterate(prob, zz, t)
        r_prod, _ = dense_residual(prob, it)
        J = sum(objective(scn, lay.i, zz[o + lay.sl_w.start: o + lay.sl_w.stop]).value for o, lay in sets["w"])
        s = zz[sets["s"]]
        return J + nu * np.sum(np.abs(r_prod[sets["viol"]])) - t * np.sum(np.log(s)), r_prod

    for k in range(config.max_iter):
        trace.append(z.copy())
        it = _to_iterate(prob, z, tau)
        shift = damp
        ladder = shifts_above(damp)
        for attempt in range(len(ladder) + 1):
            kkt = assemble_dense(prob, it, config.hessian_mode, shift)
            dz = dense_solve(kkt)
            m1 = z[sets["mult"]] + dz[sets["mult"]]
            if config.nu_policy == "per_iteration" and attempt == 0:
                nu = 0.0
            nu = max(nu, 1.0, config.nu_margin * np.max(np.abs(m1), initial=0.0))
            phi0, r_prod = phi(z, tau)
            grad_dot = 0.0
            for o, lay in sets["w"]:
                w = z[o + lay.sl_w.start: o + lay.sl_w.stop]
                grad_dot += objective(scn, lay.i, w).grad @ dz[o + lay.sl_w.start: o + lay.sl_w.stop]
            dphi = grad_dot - nu * np.sum(np.abs(r_prod[sets["viol"]])) - tau * np.sum(dz[sets["s"]] / z[sets["s"]])
            if dphi < 0:
                break
            if attempt == len(ladder):
                report.status = "DescentFailure"
                return SolveResult(prob, _to_iterate(prob, z, tau), report, trace=trace)
            shift = ladder[attempt]
        x = np.concatenate([z[sets["s"]], z[sets["mu"]]])
        dx = np.concatenate([dz[sets["s"]], dz[sets["mu"]]])
        neg = dx < 0
        amax = float(min(1.0, np.min((1 - config.kappa) * x[neg] / -dx[neg]))) if np.any(neg) else 1.0
        amax = min(amax, alpha_max_horizon(z[sets["T"]], dz[sets["T"]], K, dt, config.kappa))
        alpha = amax
        for trial in range(config.max_ls):
            zt = clip(z + alpha * dz)
            val, _ = phi(zt, tau)
            if val <= phi0 + alpha * config.gamma * dphi:
                break
            alpha *= config.beta
        else:
            report.status = "LineSearchFailure"
            return SolveResult(prob, _to_iterate(prob, z, tau), report, trace=trace)
        z = zt
        damp = update_damping(damp, alpha, config.stall_alpha)
        r_prod, _ = dense_residual(prob, _to_iterate(prob, z, tau))
        r_inf = float(np.max(np.abs(r_prod)))
        report.records.append(IterRecord(k, r_inf, tau, alpha, amax, float(phi0), float(val), float(dphi), nu,
                                         trial + 1))
        report.iterations = k + 1
        report.r_inf, report.tau = r_inf, tau
        if terminate(r_inf, tau, config.eps, config.tau_min):
            report.status, report.converged = "converged", True
            break
        tau_new = barrier_update(tau, r_inf, config.eta, config.tau_min)
        if tau_new != tau and config.nu_policy == "per_barrier":
            nu = 0.0
        tau = tau_new
    else:
        report.status = "max_iterations"
    trace.append(z.copy())
    final = _to_iterate(prob, z, tau)
    report.objective = sum(objective(scn, lay.i, final.zv[lay.i][lay.sl_w]).value for lay in prob.vehicles)
    return SolveResult(prob, final, report, trace=trace)


def sparsity_csv(kkt: DenseKkt) -> str:
    """Nonzero pattern as 'row,col' lines, for comparison with the published block picture."""
    rows, cols = np.nonzero(kkt.M)
    return "row,col\n" + "".join(f"{r},{c}\n" for r, c in zip(rows, cols))
