"""Primal-dual interior-point driver: step-size rules, merit function, barrier updates.

The per-block quantities (fraction-to-boundary bounds, merit parts, merit
slopes, multiplier norms) are computed by small kernels that the
message-passing runtime reuses, so both paths perform identical arithmetic.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .hier_linalg import StepDirection, search_direction
from .kkt_core import (
    ContractViolation, Iterate, RegularizationFailure, SingularBlock, assemble_vehicle_block, central_mu,
    central_s, clip_vehicle_times, initial_iterate, lane_mu_s, residual_norm, residual_partition,
    vehicle_coupling_inputs, vehicle_inequalities,
)
from .problem import Problem
from .reca_param import RecaMode
from .transcription import T_CLIP, Scenario, equality_constraints, objective

log = logging.getLogger(__name__)

DESCENT_SHIFTS = (1e-4, 1e-2, 1.0, 1e2, 1e4, 1e6)
DAMP_RELAX = 0.5  # accepted steps at least this long walk the stall damping back down


class SolverError(RuntimeError):
    """Solve aborted; ``result`` holds the last iterate and the partial report."""

    def __init__(self, msg, result=None):
        super().__init__(msg)
        self.result = result


class LineSearchFailure(SolverError):
    pass


class DescentFailure(SolverError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    eps: float = 1e-6
    tau0: float = 1.0
    eta: float = 0.2
    kappa: float = 0.01
    gamma: float = 1e-4
    beta: float = 0.5
    tau_min: float = 0.0
    max_iter: int = 200
    max_ls: int = 40
    hessian_mode: str = "gauss_newton"
    nu_margin: float = 1.1
    nu_policy: str = "per_iteration"  # "per_barrier": reset when tau drops; "monotone": never lowered
    stall_alpha: float = 1e-3  # accepted steps shorter than this raise the Hessian damping; 0 disables

    def __post_init__(self):
        if not 0 < self.eta < 1:
            raise ValueError("eta must lie in (0, 1)")
        if not 0 < self.gamma <= 0.5:
            raise ValueError("gamma must lie in (0, 0.5]")
        if not 0 < self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")
        if not 0 < self.kappa < 1:
            raise ValueError("kappa must lie in (0, 1)")
        if self.tau_min > self.tau0:
            raise ValueError("tau_min must not exceed tau0")
        if self.hessian_mode not in ("gauss_newton", "exact_with_inertia"):
            raise ValueError(f"unknown hessian mode {self.hessian_mode!r}")
        if not 0 <= self.stall_alpha < 1:
            raise ValueError("stall_alpha must lie in [0, 1)")
        if self.nu_policy not in ("per_barrier", "monotone", "per_iteration"):
            raise ValueError(f"unknown penalty policy {self.nu_policy!r}")

    def with_(self, **kw) -> "SolverConfig":
        return replace(self, **kw)


@dataclass
class IterRecord:
    iteration: int
    r_inf: float
    tau: float
    alpha: float
    alpha_max: float
    merit: float
    merit_new: float
    dphi: float
    nu: float
    trials: int


@dataclass
class SolveReport:
    iterations: int = 0
    records: list[IterRecord] = field(default_factory=list)
    objective: float = math.nan
    status: str = "running"
    converged: bool = False
    r_inf: float = math.inf
    tau: float = math.nan


@dataclass
class SolveResult:
    problem: Problem
    iterate: Iterate
    report: SolveReport
    ledger: object = None
    trace: list[np.ndarray] = field(default_factory=list, repr=False)

    def iterate_w(self) -> list[np.ndarray]:
        return [self.iterate.zv[lay.i][lay.sl_w].copy() for lay in self.problem.vehicles]

    def iterate_T(self) -> list[np.ndarray]:
        return [self.iterate.zv[lay.i][lay.sl_T].copy() for lay in self.problem.vehicles]


# ---- step size ----

def alpha_max_entries(x: np.ndarray, dx: np.ndarray, kappa: float) -> float:
    """Largest alpha in (0, 1] with x + alpha dx >= kappa x entrywise."""
    neg = dx < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min((1.0 - kappa) * x[neg] / (-dx[neg]))))


def alpha_max_horizon(T: np.ndarray, dT: np.ndarray, K: int, dt: float, kappa: float) -> float:
    """Keep crossing times strictly inside the clip box so trial points are never clipped.

    Entries already sitting on a clip bound are skipped; those still rely on the clip.
    """
    lo, hi = T - T_CLIP, (K * dt - T_CLIP) - T
    x = np.concatenate([lo, hi])
    dx = np.concatenate([dT, -dT])
    keep = x > 0
    return alpha_max_entries(x[keep], dx[keep], kappa)


def alpha_max_vehicle(prob: Problem, i: int, zv, dzv, kappa: float) -> float:
    lay = prob.vehicles[i]
    a = min(alpha_max_entries(zv[lay.sl_s], dzv[lay.sl_s], kappa),
            alpha_max_entries(zv[lay.sl_mu], dzv[lay.sl_mu], kappa))
    if lay.n_T:
        a = min(a, alpha_max_horizon(zv[lay.sl_T], dzv[lay.sl_T], prob.K, prob.scenario.dt, kappa))
    return a


def alpha_max_lane(prob: Problem, l: int, zl, dzl, kappa: float) -> float:
    if not prob.lane_has_bounds(l):
        return 1.0
    mu, s = lane_mu_s(prob, l, zl)
    dmu, ds = lane_mu_s(prob, l, dzl)
    return min(alpha_max_entries(s, ds, kappa), alpha_max_entries(mu, dmu, kappa))


def alpha_max_central(prob: Problem, zc, dzc, kappa: float) -> float:
    if prob.n_C == 0:
        return 1.0
    return min(alpha_max_entries(central_s(prob, zc), central_s(prob, dzc), kappa),
               alpha_max_entries(central_mu(prob, zc), central_mu(prob, dzc), kappa))


def fraction_to_boundary(prob: Problem, it: Iterate, d: StepDirection, kappa: float) -> float:
    """Blockwise fraction-to-boundary bounds combined by min."""
    a = [alpha_max_vehicle(prob, i, it.zv[i], d.dzv[i], kappa) for i in range(prob.n_vehicles)]
    a += [alpha_max_lane(prob, l, it.zl[l], d.dzl[l], kappa) for l in range(prob.n_lanes)]
    a.append(alpha_max_central(prob, it.zc, d.dzc, kappa))
    return min(a)


# ---- multiplier norms ----

def multiplier_norms_vehicle(prob: Problem, i: int, zv, dzv) -> tuple[float, float]:
    lay = prob.vehicles[i]
    m = np.concatenate([zv[lay.sl_lam], zv[lay.sl_mu]])
    dm = np.concatenate([dzv[lay.sl_lam], dzv[lay.sl_mu]])
    return _inf(m), _inf(m + dm)


def multiplier_norms_lane(prob: Problem, l: int, zl, dzl) -> tuple[float, float]:
    if prob.mode is RecaMode.PRIMAL or not prob.lanes[l].active:
        return 0.0, 0.0
    m = lane_mu_s(prob, l, zl)[0] if prob.mode is RecaMode.EXACT else zl
    dm = lane_mu_s(prob, l, dzl)[0] if prob.mode is RecaMode.EXACT else dzl
    return _inf(m), _inf(m + dm)


def multiplier_norms_central(prob: Problem, zc, dzc) -> tuple[float, float]:
    m, dm = central_mu(prob, zc), central_mu(prob, dzc)
    return _inf(m), _inf(m + dm)


def update_nu(nu: float, norms: list[tuple[float, float]], margin: float) -> float:
    """nu <- max(nu, 1, margin * ||(lam + dlam, mu + dmu)||_inf).

    Only the multipliers the step moves to matter for descent.  The caller
    decides when nu restarts from zero (see SolverConfig.nu_policy).
    """
    big = max((b for a, b in norms), default=0.0)
    return max(nu, 1.0, margin * big)


def _inf(v) -> float:
    return float(np.max(np.abs(v))) if v.size else 0.0


def _l1(v) -> float:
    return float(np.sum(np.abs(v)))


# ---- merit ----

@dataclass
class MeritPart:
    value: float
    slope: float = 0.0


def trial_vehicle(prob: Problem, i: int, zv, dzv, alpha: float) -> np.ndarray:
    z = zv + alpha * dzv
    clip_vehicle_times(prob, i, z)
    return z


def merit_vehicle(prob: Problem, i: int, zv, cL, nu: float, tau: float, dzv=None) -> MeritPart:
    """J_i + nu (||g_i||_1 + ||h_i + s_i||_1) - tau sum log s_i, optionally with its slope along dzv."""
    lay = prob.vehicles[i]
    scn = prob.scenario
    y, s = zv[lay.sl_y], zv[lay.sl_s]
    if np.any(s <= 0):
        raise ContractViolation(f"vehicle {i}: slack not positive in merit evaluation")
    ob = objective(scn, i, y[lay.sl_w])
    g = equality_constraints(scn, i, y[lay.sl_w], y[lay.sl_T]).value
    h, _ = vehicle_inequalities(prob, lay, y)
    if lay.a:
        h = h + (lay.A @ cL)[lay.sl_mu]
    viol = _l1(g) + _l1(h + s)
    val = ob.value + nu * viol - tau * float(np.sum(np.log(s)))
    slope = 0.0
    if dzv is not None:
        slope = float(ob.grad @ dzv[lay.sl_w]) - nu * viol - tau * float(np.sum(dzv[lay.sl_s] / s))
    return MeritPart(val, slope)


def merit_lane(prob: Problem, l: int, zl, payloads: dict, nu: float, tau: float, dzl=None) -> MeritPart:
    from .kkt_core import lane_primal
    lane = prob.lanes[l]
    if not lane.active or prob.mode is RecaMode.PRIMAL:
        return MeritPart(0.0, 0.0)
    prim = lane_primal(prob, l, payloads)
    if prob.mode is RecaMode.DUAL:
        viol = _l1(prim)
        return MeritPart(nu * viol, -nu * viol if dzl is not None else 0.0)
    mu, s = lane_mu_s(prob, l, zl)
    if np.any(s <= 0):
        raise ContractViolation(f"lane {l}: slack not positive in merit evaluation")
    viol = _l1(prim + s)
    val = nu * viol - tau * float(np.sum(np.log(s)))
    slope = 0.0
    if dzl is not None:
        slope = -nu * viol - tau * float(np.sum(lane_mu_s(prob, l, dzl)[1] / s))
    return MeritPart(val, slope)


def merit_central(prob: Problem, zc, T_list: dict, nu: float, tau: float, dzc=None) -> MeritPart:
    from .kkt_core import central_primal
    if prob.n_C == 0:
        return MeritPart(0.0, 0.0)
    s = central_s(prob, zc)
    if np.any(s <= 0):
        raise ContractViolation("central: slack not positive in merit evaluation")
    viol = _l1(central_primal(prob, T_list) + s)
    val = nu * viol - tau * float(np.sum(np.log(s)))
    slope = 0.0
    if dzc is not None:
        slope = -nu * viol - tau * float(np.sum(central_s(prob, dzc) / s))
    return MeritPart(val, slope)


def combine(parts_v, parts_l, part_c, attr: str = "value") -> float:
    """Fixed-order sum: vehicles ascending, lanes ascending, central."""
    tot = 0.0
    for p in parts_v:
        tot += getattr(p, attr)
    for p in parts_l:
        tot += getattr(p, attr)
    return tot + getattr(part_c, attr)


def _payloads(prob: Problem, l: int, zv_list) -> dict:
    from .kkt_core import lane_payload
    return {i: lane_payload(prob, i, zv_list[i]) for i in prob.lanes[l].vehicles}


def merit(prob: Problem, it: Iterate, nu: float, d: StepDirection | None = None) -> tuple[float, float, dict]:
    """phi and (when a direction is given) its directional derivative, plus the blockwise parts."""
    pv = []
    for i in range(prob.n_vehicles):
        cL, _ = vehicle_coupling_inputs(prob, it, i)
        pv.append(merit_vehicle(prob, i, it.zv[i], cL, nu, it.tau, None if d is None else d.dzv[i]))
    pl = [merit_lane(prob, l, it.zl[l], _payloads(prob, l, it.zv), nu, it.tau, None if d is None else d.dzl[l])
          for l in range(prob.n_lanes)]
    T_list = {lay.i: it.zv[lay.i][lay.sl_T] for lay in prob.vehicles}
    pc = merit_central(prob, it.zc, T_list, nu, it.tau, None if d is None else d.dzc)
    return combine(pv, pl, pc), combine(pv, pl, pc, "slope"), {"v": pv, "l": pl, "c": pc}


def merit_directional_derivative(prob: Problem, it: Iterate, d: StepDirection, nu: float) -> float:
    return merit(prob, it, nu, d)[1]


def trial_iterate(prob: Problem, it: Iterate, d: StepDirection, alpha: float) -> Iterate:
    zv = [trial_vehicle(prob, i, it.zv[i], d.dzv[i], alpha) for i in range(prob.n_vehicles)]
    zl = [it.zl[l] + alpha * d.dzl[l] for l in range(prob.n_lanes)]
    return Iterate(zv, zl, it.zc + alpha * d.dzc, it.tau)


def armijo_backtrack(phi_at, phi0: float, dphi: float, alpha_max: float, config: SolverConfig):
    """alpha = alpha_max * beta^j for the smallest j with phi(alpha) <= phi0 + alpha gamma dphi.

    Returns (alpha, phi(alpha), trials).
    """
    if not dphi < 0:
        raise DescentFailure(f"merit slope {dphi:g} is not negative")
    alpha = alpha_max
    for j in range(config.max_ls):
        val = phi_at(alpha)
        if val <= phi0 + alpha * config.gamma * dphi:
            return alpha, val, j + 1
        alpha *= config.beta
    raise LineSearchFailure(f"no sufficient decrease after {config.max_ls} trials")


def barrier_update(tau: float, r_inf: float, eta: float, tau_min: float) -> float:
    """Fiacco-McCormick: shrink tau by eta once the barrier residual drops below tau."""
    if r_inf < tau:
        return max(eta * tau, tau_min)
    return tau


def terminate(r_inf: float, tau: float, eps: float, tau_min: float = 0.0) -> bool:
    if not r_inf < eps:
        return False
    if tau < eps:
        return True
    return tau_min > 0 and tau <= tau_min


def total_objective(prob: Problem, it: Iterate) -> float:
    tot = 0.0
    for lay in prob.vehicles:
        tot += objective(prob.scenario, lay.i, it.zv[lay.i][lay.sl_w]).value
    return tot


# ---- Hessian shifts ----

def shifts_above(base: float) -> tuple[float, ...]:
    """Shifts tried in order when the merit slope at shift ``base`` is not negative."""
    return tuple(x for x in DESCENT_SHIFTS if x > base)


def update_damping(damp: float, alpha: float, stall_alpha: float) -> float:
    """Levenberg-Marquardt style damping: one rung up after a stalled step, one down after a long one."""
    if alpha < stall_alpha:
        up = shifts_above(damp)
        return up[0] if up else damp
    if alpha >= DAMP_RELAX and damp > 0:
        down = [x for x in DESCENT_SHIFTS if x < damp]
        return down[-1] if down else 0.0
    return damp


# ---- outer loop ----

def _blocks(prob: Problem, it: Iterate, config: SolverConfig, shift: float = 0.0):
    out = []
    for i in range(prob.n_vehicles):
        cL, cC = vehicle_coupling_inputs(prob, it, i)
        out.append(assemble_vehicle_block(prob, i, it.zv[i], cL, cC, it.tau, config.hessian_mode, shift))
    return out


def _multiplier_norms(prob: Problem, it: Iterate, d: StepDirection):
    norms = [multiplier_norms_vehicle(prob, i, it.zv[i], d.dzv[i]) for i in range(prob.n_vehicles)]
    norms += [multiplier_norms_lane(prob, l, it.zl[l], d.dzl[l]) for l in range(prob.n_lanes)]
    norms.append(multiplier_norms_central(prob, it.zc, d.dzc))
    return norms


def solve(problem: Problem | Scenario, config: SolverConfig | None = None, keep_trace: bool = False,
          iterate: Iterate | None = None) -> SolveResult:
    """Monolithic execution of the hierarchical PDIP (same kernels as the distributed runtime)."""
    config = config or SolverConfig()
    prob = problem if isinstance(problem, Problem) else Problem(problem)
    it = iterate.copy() if iterate is not None else initial_iterate(prob)
    it.tau = config.tau0 if iterate is None else it.tau
    report = SolveReport()
    result = SolveResult(prob, it, report)
    nu = 0.0
    damp = 0.0
    for k in range(config.max_iter):
        if keep_trace:
            result.trace.append(it.flat())
        try:
            shift = damp
            ladder = shifts_above(damp)
            for attempt in range(len(ladder) + 1):
                blocks = _blocks(prob, it, config, shift)
                d = search_direction(prob, it, blocks)
                if config.nu_policy == "per_iteration" and attempt == 0:
                    nu = 0.0
                nu = update_nu(nu, _multiplier_norms(prob, it, d), config.nu_margin)
                phi0, dphi, _ = merit(prob, it, nu, d)
                if dphi < 0:
                    break
                if attempt == len(ladder):
                    raise DescentFailure(f"iteration {k}: merit slope {dphi:g} after shift {shift:g}")
                shift = ladder[attempt]
                log.info("iteration %d: nonnegative merit slope %g, shifting Hessian by %g", k, dphi, shift)
            amax = fraction_to_boundary(prob, it, d, config.kappa)
            alpha, phi_new, trials = armijo_backtrack(
                lambda a: merit(prob, trial_iterate(prob, it, d, a), nu)[0], phi0, dphi, amax, config)
        except (SolverError, SingularBlock, RegularizationFailure, ContractViolation) as exc:
            report.status = type(exc).__name__
            report.iterations = k
            report.objective = total_objective(prob, it)
            log.warning("solve stopped at iteration %d: %s", k, exc)
            if isinstance(exc, SolverError):
                exc.result = result
            return result
        it = trial_iterate(prob, it, d, alpha)
        damp = update_damping(damp, alpha, config.stall_alpha)
        r_inf, _ = residual_norm(residual_partition(prob, it))
        report.records.append(IterRecord(k, r_inf, it.tau, alpha, amax, phi0, phi_new, dphi, nu, trials))
        result.iterate = it
        report.iterations = k + 1
        report.r_inf, report.tau = r_inf, it.tau
        if terminate(r_inf, it.tau, config.eps, config.tau_min):
            report.status = "converged"
            report.converged = True
            break
        tau_new = barrier_update(it.tau, r_inf, config.eta, config.tau_min)
        if tau_new != it.tau and config.nu_policy == "per_barrier":
            nu = 0.0  # the penalty only has to dominate the multipliers of the current subproblem
        it.tau = tau_new
    else:
        report.status = "max_iterations"
    if keep_trace:
        result.trace.append(it.flat())
    report.objective = total_objective(prob, it)
    result.iterate = it
    return result
