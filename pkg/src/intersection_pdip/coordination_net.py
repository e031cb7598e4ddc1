"""Message-driven execution of the PDIP over vehicle, lane and central nodes.

Every node owns only its block of the iterate plus the copies of
neighbouring data it has received.  Nodes talk exclusively through a
MessageBus whose payloads are serialized to float64 bytes; the CommLedger
counts what was actually serialized.  The arithmetic is delegated to the
same kernels as pdip_solver.solve and all reductions run in the same fixed
order, so the iterate sequence is bit-identical to the monolithic solve.

Message schedule of one iteration (phase tags in legal order):

    shift              C->v Hessian shift (only when a direction is recomputed)
    search_direction   v->L (D, X, d, u), v->C (DTT, dT, T), L->C (H, h)
    central_broadcast  C->L C_l^T dmu^C, C->v C_i^T dmu^C
    lane_broadcast     L->v raw segment slices of dz^L
    penalty            v->C, L->C multiplier norm; C->v, C->L nu
    step_size          v->L du, v->C (amax, phi0, dphi0, dT), L->C (amax, phi0, dphi0)
    merit              per trial: C->v, C->L alpha; v->C, L->C phi(alpha)
    control            C->v, C->L commit; v->C, L->C ||r||; C->v, C->L (tau, stop)
"""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .hier_linalg import (
    LaneCondensed, VehicleContribution, central_newton_rhs, central_solve, lane_condense, lane_newton_rhs,
    lane_solve, vehicle_condense, vehicle_solve,
)
from .kkt_core import (
    ContractViolation, RegularizationFailure, SingularBlock, assemble_vehicle_block, central_mu, eval_vehicle,
    initial_iterate, lane_payload, residual_central_from, residual_lane_from,
)
from .pdip_solver import (
    DescentFailure, LineSearchFailure, MeritPart, SolveReport, SolveResult, SolverConfig,
    SolverError, IterRecord, alpha_max_central, alpha_max_lane, alpha_max_vehicle, barrier_update, combine,
    merit_central, merit_lane, merit_vehicle, multiplier_norms_central, multiplier_norms_lane,
    multiplier_norms_vehicle, shifts_above, terminate, total_objective, trial_vehicle, update_damping, update_nu,
)
from .problem import Problem, apply_CT, gather_coupling, segment_slices
from .transcription import Scenario, clip_time

FLOAT_BITS = 64
PHASES = ("init", "shift", "search_direction", "central_broadcast", "lane_broadcast", "penalty", "step_size", "merit",
          "control")


class Tier(str, Enum):
    VEHICLE = "vehicle"
    LANE = "lane"
    CENTRAL = "central"


@dataclass(frozen=True, order=True)
class NodeId:
    tier: Tier
    index: int = 0

    def __str__(self):
        return f"{self.tier.value}[{self.index}]"


CENTRAL = NodeId(Tier.CENTRAL, 0)


def vehicle(i: int) -> NodeId:
    return NodeId(Tier.VEHICLE, i)


def lane(l: int) -> NodeId:
    return NodeId(Tier.LANE, l)


# ---- serialization ----

def pack_sym(M: np.ndarray) -> np.ndarray:
    """Lower triangle, row by row."""
    return M[np.tril_indices(M.shape[0])]


def unpack_sym(v: np.ndarray, n: int) -> np.ndarray:
    M = np.zeros((n, n))
    M[np.tril_indices(n)] = v
    return M + np.tril(M, -1).T


def serialize(parts) -> bytes:
    flat = [np.asarray(p, dtype="<f8").ravel() for p in parts]
    return np.concatenate(flat).tobytes() if flat else b""


def deserialize(blob: bytes, sizes) -> list[np.ndarray]:
    arr = np.frombuffer(blob, dtype="<f8")
    out, o = [], 0
    for n in sizes:
        out.append(arr[o: o + n].copy())
        o += n
    if o != arr.size:
        raise ContractViolation(f"payload has {arr.size} floats, expected {o}")
    return out


@dataclass(frozen=True)
class Message:
    src: NodeId
    dst: NodeId
    phase: str
    iteration: int
    round: int
    kind: str
    blob: bytes = field(repr=False)

    @property
    def floats(self) -> int:
        return len(self.blob) // 8

    def unpack(self, sizes) -> list[np.ndarray]:
        return deserialize(self.blob, sizes)


def airtime_microseconds(n_data_bits: int) -> int:
    """802.11p airtime model: 50 + 8 ceil((n + 22) / 48) microseconds."""
    if n_data_bits < 0:
        raise ValueError("bit count must be nonnegative")
    return 50 + 8 * math.ceil((n_data_bits + 22) / 48)


# ---- ledger ----

@dataclass
class LedgerRow:
    iteration: int
    phase: str
    round: int
    kind: str
    src: NodeId
    dst: NodeId
    floats: int

    @property
    def bits(self) -> int:
        return FLOAT_BITS * self.floats

    @property
    def airtime_us(self) -> int:
        return airtime_microseconds(self.bits)


class CommLedger:
    """Every transmitted message, in send order."""

    def __init__(self):
        self.rows: list[LedgerRow] = []

    def record(self, msg: Message) -> None:
        self.rows.append(LedgerRow(msg.iteration, msg.phase, msg.round, msg.kind, msg.src, msg.dst, msg.floats))

    def select(self, phase=None, src_tier=None, dst_tier=None, iteration=None, kind=None):
        st = Tier(src_tier) if src_tier is not None else None
        dt = Tier(dst_tier) if dst_tier is not None else None
        return [r for r in self.rows
                if (phase is None or r.phase == phase) and (st is None or r.src.tier == st)
                and (dt is None or r.dst.tier == dt) and (iteration is None or r.iteration == iteration)
                and (kind is None or r.kind == kind)]

    def total_floats(self, **kw) -> int:
        return sum(r.floats for r in self.select(**kw))

    def first_iteration_floats(self, phase: str, src_tier, dst_tier) -> int:
        its = sorted({r.iteration for r in self.rows if r.iteration >= 0})
        return self.total_floats(phase=phase, src_tier=src_tier, dst_tier=dst_tier, iteration=its[0]) if its else 0

    def per_link(self, iteration: int, phase: str) -> dict:
        out: dict = {}
        for r in self.select(phase=phase, iteration=iteration):
            out[(r.src, r.dst)] = out.get((r.src, r.dst), 0) + r.floats
        return out

    def iteration_airtime_us(self, iteration: int) -> int:
        """Parallel links: each (phase, round, kind) costs its slowest message; those add up."""
        slot: dict = {}
        for r in self.select(iteration=iteration):
            key = (PHASES.index(r.phase), r.round, r.kind)
            slot[key] = max(slot.get(key, 0), r.airtime_us)
        return sum(slot[k] for k in sorted(slot))

    def iterations(self) -> list[int]:
        return sorted({r.iteration for r in self.rows})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "phase", "round", "kind", "src_tier", "src_idx", "dst_tier", "dst_idx", "floats",
                    "bits", "airtime_us"])
        for r in self.rows:
            w.writerow([r.iteration, r.phase, r.round, r.kind, r.src.tier.value, r.src.index, r.dst.tier.value,
                        r.dst.index, r.floats, r.bits, r.airtime_us])
        return buf.getvalue()


class MessageBus:
    """Point-to-point mailboxes with FIFO delivery; every send is ledgered."""

    def __init__(self, ledger: CommLedger | None = None):
        self.ledger = ledger if ledger is not None else CommLedger()
        self.boxes: dict[NodeId, list[Message]] = {}
        self.iteration = -1
        self.round = 0
        self._last_phase = 0

    def send(self, src: NodeId, dst: NodeId, phase: str, kind: str, parts) -> None:
        p = PHASES.index(phase)
        if p < self._last_phase:
            raise ContractViolation(f"phase {phase} sent after {PHASES[self._last_phase]} in iteration {self.iteration}")
        self._last_phase = p
        msg = Message(src, dst, phase, self.iteration, self.round, kind, serialize(parts))
        self.ledger.record(msg)
        self.boxes.setdefault(dst, []).append(msg)

    def receive(self, dst: NodeId, kind: str, src: NodeId | None = None) -> Message:
        box = self.boxes.get(dst, [])
        for n, m in enumerate(box):
            if m.kind == kind and (src is None or m.src == src):
                return box.pop(n)
        raise ContractViolation(f"{dst} expected a {kind!r} message from {src}")

    def start_iteration(self, k: int) -> None:
        self.iteration, self.round, self._last_phase = k, 0, 0

    def restart_phases(self) -> None:
        """A repeated search-direction round (Hessian shift) begins a new round."""
        self.round += 1
        self._last_phase = 0

    def pending(self) -> int:
        return sum(len(b) for b in self.boxes.values())


# ---- expected counts ----

def expected_floats(link: str, K: int = 0, n_T: int = 0, n_TL: int = 0, a: int | None = None,
                    slices: int | None = None) -> int:
    """Closed-form float count of one message.

    ``a`` is the length of the vehicle's coupling vector (K+1 for the exact
    rear-end constraints) and ``slices`` the total length of the raw lane
    slices a vehicle receives.
    """
    if min(K, n_T, n_TL) < 0:
        raise ValueError("arguments must be nonnegative")
    a = K + 1 if a is None else a
    if link == "v2l_search":
        if a == K + 1:
            # (K^2 + (2 n_T + 7) K + 2 n_T + 6) / 2, integer for every K
            return (K * K + (2 * n_T + 7) * K + 2 * n_T + 6) // 2
        return a * (a + 1) // 2 + a * n_T + 2 * a
    if link == "v2c_search":
        return (n_T * n_T + 5 * n_T) // 2
    if link == "l2c_search":
        return (n_TL * n_TL + 3 * n_TL) // 2
    if link == "c2l_search":
        return n_TL
    if link == "c2v_search":
        return n_T
    if link == "l2v_search":
        return 2 * (K + 1) if slices is None else slices
    if link == "v2l_step":
        return a
    if link == "v2c_step":
        return 3 + n_T
    if link == "l2c_step":
        return 3
    if link in ("c2x_alpha", "v2c_merit", "l2c_merit", "x2c_norm", "c2x_nu", "c2x_shift", "c2x_commit",
                "x2c_residual"):
        return 1
    if link == "c2x_status":
        return 2
    if link == "l2v_init":
        return 2 * (K + 1) if slices is None else slices
    if link == "c2v_init":
        return n_T
    raise ValueError(f"unknown link kind {link!r}")


def expected_for_row(prob: Problem, row: LedgerRow) -> int:
    """expected_floats evaluated with the dimensions of the endpoints of a ledger row."""
    K = prob.K

    def vdims(i):
        lay = prob.vehicles[i]
        return lay.n_T, lay.a, sum(s.length for s in lay.segments)

    kind = row.kind
    if row.src.tier is Tier.VEHICLE:
        n_T, a, sl = vdims(row.src.index)
    elif row.dst.tier is Tier.VEHICLE:
        n_T, a, sl = vdims(row.dst.index)
    else:
        n_T, a, sl = 0, None, None
    n_TL = 0
    for node in (row.src, row.dst):
        if node.tier is Tier.LANE:
            n_TL = prob.lanes[node.index].n_TL
    return expected_floats(kind, K, n_T=n_T, n_TL=n_TL, a=a, slices=sl)


# ---- nodes ----

class VehicleNode:
    def __init__(self, prob: Problem, i: int, zv: np.ndarray):
        self.prob, self.i = prob, i
        self.lay = prob.vehicles[i]
        self.id = vehicle(i)
        self.zv = zv.copy()
        self.slices: list[np.ndarray] = []
        self.cC = np.zeros(self.lay.n_T)
        self.tau = 1.0
        self.nu = 0.0
        self.shift = 0.0
        self.block = None
        self.dzv = None
        self.dslices: list[np.ndarray] = []
        self.dcC = np.zeros(self.lay.n_T)
        self.trial = None

    @property
    def cL(self):
        return gather_coupling(self.lay, self.slices) if self.lay.a else np.zeros(0)

    def assemble_and_condense(self, hessian_mode: str) -> VehicleContribution:
        self.block = assemble_vehicle_block(self.prob, self.i, self.zv, self.cL, self.cC, self.tau, hessian_mode,
                                            self.shift)
        return vehicle_condense(self.prob, self.block, self.zv)

    def back_substitute(self, dslices, dcC) -> None:
        self.dslices, self.dcC = dslices, dcC
        self.dzv = vehicle_solve(self.prob, self.block, dslices, dcC)

    def multiplier_norm(self) -> float:
        return multiplier_norms_vehicle(self.prob, self.i, self.zv, self.dzv)[1]

    def step_quantities(self, kappa: float):
        amax = alpha_max_vehicle(self.prob, self.i, self.zv, self.dzv, kappa)
        part = merit_vehicle(self.prob, self.i, self.zv, self.cL, self.nu, self.tau, self.dzv)
        return amax, part

    def trial_merit(self, alpha: float) -> float:
        z = trial_vehicle(self.prob, self.i, self.zv, self.dzv, alpha)
        sl = [s + alpha * d for s, d in zip(self.slices, self.dslices)]
        cL = gather_coupling(self.lay, sl) if self.lay.a else np.zeros(0)
        self.trial = (alpha, z, sl)
        return merit_vehicle(self.prob, self.i, z, cL, self.nu, self.tau).value

    def commit(self, alpha: float) -> None:
        if self.trial is None or self.trial[0] != alpha:
            self.trial_merit(alpha)
        _, self.zv, self.slices = self.trial
        self.cC = self.cC + alpha * self.dcC
        self.trial = None

    def residual_norm(self) -> float:
        r = eval_vehicle(self.prob, self.i, self.zv, self.cL, self.cC, self.tau).r
        return float(np.max(np.abs(r))) if r.size else 0.0


class LaneNode:
    def __init__(self, prob: Problem, l: int, zl: np.ndarray):
        self.prob, self.l = prob, l
        self.lane = prob.lanes[l]
        self.id = lane(l)
        self.zl = zl.copy()
        self.tau = 1.0
        self.nu = 0.0
        self.payloads: dict = {}
        self.dpayloads: dict = {}
        self.lc: LaneCondensed | None = None
        self.dzl = np.zeros(0)
        self.trial = None

    def condense(self, contribs: dict) -> LaneCondensed:
        rl = residual_lane_from(self.prob, self.l, self.zl, self.payloads, self.tau)
        self.lc = lane_condense(self.prob, self.l, contribs, self.zl, lane_newton_rhs(self.prob, self.l, self.zl, rl))
        return self.lc

    def back_substitute(self, dmu_CL) -> None:
        self.dzl = lane_solve(self.lc, dmu_CL)

    def multiplier_norm(self) -> float:
        return multiplier_norms_lane(self.prob, self.l, self.zl, self.dzl)[1]

    def step_quantities(self, kappa: float):
        amax = alpha_max_lane(self.prob, self.l, self.zl, self.dzl, kappa)
        part = merit_lane(self.prob, self.l, self.zl, self.payloads, self.nu, self.tau, self.dzl)
        return amax, part

    def trial_merit(self, alpha: float) -> float:
        zl = self.zl + alpha * self.dzl
        pay = {i: self.payloads[i] + alpha * self.dpayloads[i] for i in self.lane.vehicles}
        self.trial = (alpha, zl, pay)
        return merit_lane(self.prob, self.l, zl, pay, self.nu, self.tau).value

    def commit(self, alpha: float) -> None:
        if self.trial is None or self.trial[0] != alpha:
            self.trial_merit(alpha)
        _, self.zl, self.payloads = self.trial
        self.trial = None

    def residual_norm(self) -> float:
        r = residual_lane_from(self.prob, self.l, self.zl, self.payloads, self.tau)
        return float(np.max(np.abs(r))) if r.size else 0.0


class CentralNode:
    def __init__(self, prob: Problem, zc: np.ndarray):
        self.prob = prob
        self.zc = zc.copy()
        self.tau = 1.0
        self.T: dict = {}
        self.dT: dict = {}
        self.dzc = np.zeros(0)
        self.trial = None

    def solve(self, contribs: dict, lanes: dict) -> np.ndarray:
        rc = residual_central_from(self.prob, self.zc, self.T, self.tau)
        self.dzc = central_solve(self.prob, self.zc, central_newton_rhs(self.prob, self.zc, rc), contribs, lanes)
        return self.dzc

    def trial_T(self, alpha: float) -> dict:
        K, dt = self.prob.K, self.prob.scenario.dt
        return {i: clip_time(self.T[i] + alpha * self.dT[i], K, dt) for i in self.T}

    def trial_merit(self, alpha: float, nu: float) -> float:
        zc = self.zc + alpha * self.dzc
        T = self.trial_T(alpha)
        self.trial = (alpha, zc, T)
        return merit_central(self.prob, zc, T, nu, self.tau).value

    def commit(self, alpha: float, nu: float) -> None:
        if self.trial is None or self.trial[0] != alpha:
            self.trial_merit(alpha, nu)
        _, self.zc, self.T = self.trial
        self.trial = None

    def residual_norm(self) -> float:
        r = residual_central_from(self.prob, self.zc, self.T, self.tau)
        return float(np.max(np.abs(r))) if r.size else 0.0


# ---- runtime ----

@dataclass
class DistributedRuntime:
    prob: Problem
    config: SolverConfig
    workers: int = 1
    bus: MessageBus = field(default_factory=MessageBus)

    def __post_init__(self):
        it0 = initial_iterate(self.prob)
        self.vehicles = [VehicleNode(self.prob, i, it0.zv[i]) for i in range(self.prob.n_vehicles)]
        self.lanes = [LaneNode(self.prob, l, it0.zl[l]) for l in range(self.prob.n_lanes)]
        self.central = CentralNode(self.prob, it0.zc)
        self.pool = ThreadPoolExecutor(self.workers) if self.workers > 1 else None
        self._init_round(it0)

    # helpers
    def _map(self, fn, items):
        if self.pool is None:
            return [fn(x) for x in items]
        return list(self.pool.map(fn, items))

    def _active_lanes(self):
        return [ln for ln in self.lanes if ln.lane.active]

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()

    def _init_round(self, it0) -> None:
        bus, prob = self.bus, self.prob
        bus.start_iteration(-1)
        for v in self.vehicles:
            lay = v.lay
            if lay.a:
                bus.send(lane(lay.lane), v.id, "init", "l2v_init", segment_slices(lay, it0.zl[lay.lane]))
        for v in self.vehicles:
            if v.lay.n_T:
                bus.send(CENTRAL, v.id, "init", "c2v_init",
                         [apply_CT(prob.C_i(v.i), central_mu(prob, it0.zc))])
        for v in self.vehicles:
            lay = v.lay
            if lay.a:
                m = bus.receive(v.id, "l2v_init")
                v.slices = m.unpack([s.length for s in lay.segments])
            if lay.n_T:
                v.cC = bus.receive(v.id, "c2v_init").unpack([lay.n_T])[0]

    def _broadcast(self, phase: str, kind: str, parts, lanes_too: bool = True) -> None:
        for v in self.vehicles:
            self.bus.send(CENTRAL, v.id, phase, kind, parts)
        if lanes_too:
            for ln in self._active_lanes():
                self.bus.send(CENTRAL, ln.id, phase, kind, parts)

    def _recv_scalar(self, node: NodeId, kind: str, n: int = 1) -> np.ndarray:
        return self.bus.receive(node, kind, CENTRAL).unpack([n])[0]

    def send_shift(self, shift: float) -> None:
        for v in self.vehicles:
            self.bus.send(CENTRAL, v.id, "shift", "c2x_shift", [[shift]])
        for v in self.vehicles:
            v.shift = float(self._recv_scalar(v.id, "c2x_shift")[0])

    # one search direction: condense upward, solve at the center, back-substitute downward
    def search_direction(self) -> None:
        bus, prob = self.bus, self.prob
        contribs = self._map(lambda v: v.assemble_and_condense(self.config.hessian_mode), self.vehicles)
        for v, c in zip(self.vehicles, contribs):
            lay = v.lay
            if lay.a:
                bus.send(v.id, lane(lay.lane), "search_direction", "v2l_search",
                         [pack_sym(c.D), c.X, c.d, c.u])
            if lay.n_T:
                bus.send(v.id, CENTRAL, "search_direction", "v2c_search", [pack_sym(c.DTT), c.dT, c.T])
        # lanes
        lane_out = {}
        for ln in self._active_lanes():
            recv = {}
            for i in sorted(ln.lane.vehicles):
                lay = prob.vehicles[i]
                a, nT = lay.a, lay.n_T
                Dp, X, d, u = bus.receive(ln.id, "v2l_search", vehicle(i)).unpack(
                    [a * (a + 1) // 2, a * nT, a, a])
                recv[i] = VehicleContribution(i, unpack_sym(Dp, a), d, X.reshape(a, nT), u, None, None, None)
                ln.payloads[i] = u
            lc = ln.condense(recv)
            lane_out[ln.l] = lc
            if ln.lane.n_TL:
                bus.send(ln.id, CENTRAL, "search_direction", "l2c_search", [pack_sym(lc.H), lc.hvec])
        # central
        cen = self.central
        vc = {}
        for v in self.vehicles:
            nT = v.lay.n_T
            if nT:
                Dp, dT, T = bus.receive(CENTRAL, "v2c_search", v.id).unpack([nT * (nT + 1) // 2, nT, nT])
                vc[v.i] = VehicleContribution(v.i, None, None, None, None, unpack_sym(Dp, nT), dT, T)
                cen.T[v.i] = T
        lanes_c = {}
        for l in range(prob.n_lanes):
            n = prob.lanes[l].n_TL
            if prob.lanes[l].active and n:
                Hp, h = bus.receive(CENTRAL, "l2c_search", lane(l)).unpack([n * (n + 1) // 2, n])
                lanes_c[l] = LaneCondensed(l, None, None, None, None, unpack_sym(Hp, n), h)
        dzc = cen.solve(vc, lanes_c)
        dmu = dzc[: prob.n_C]
        for ln in self._active_lanes():
            if ln.lane.n_TL:
                bus.send(CENTRAL, ln.id, "central_broadcast", "c2l_search",
                         [apply_CT(prob.C[:, ln.lane.T_cols], dmu)])
        for v in self.vehicles:
            if v.lay.n_T:
                bus.send(CENTRAL, v.id, "central_broadcast", "c2v_search", [apply_CT(prob.C_i(v.i), dmu)])
        # lanes solve and broadcast raw slices
        for ln in self._active_lanes():
            n = ln.lane.n_TL
            dmu_CL = bus.receive(ln.id, "c2l_search", CENTRAL).unpack([n])[0] if n else np.zeros(0)
            ln.back_substitute(dmu_CL)
            for i in sorted(ln.lane.vehicles):
                bus.send(ln.id, vehicle(i), "lane_broadcast", "l2v_search", segment_slices(prob.vehicles[i], ln.dzl))
        for ln in self.lanes:
            if not ln.lane.active:
                ln.dzl = np.zeros(ln.lane.n_z)

        inbox = {}
        for v in self.vehicles:
            lay = v.lay
            dcC = bus.receive(v.id, "c2v_search", CENTRAL).unpack([lay.n_T])[0] if lay.n_T else np.zeros(0)
            dsl = bus.receive(v.id, "l2v_search", lane(lay.lane)).unpack([s.length for s in lay.segments]) \
                if lay.a else []
            inbox[v.i] = (dsl, dcC)
        self._map(lambda v: v.back_substitute(*inbox[v.i]), self.vehicles)

    def penalty(self, nu: float) -> float:
        bus = self.bus
        for v in self.vehicles:
            bus.send(v.id, CENTRAL, "penalty", "x2c_norm", [[v.multiplier_norm()]])
        for ln in self._active_lanes():
            bus.send(ln.id, CENTRAL, "penalty", "x2c_norm", [[ln.multiplier_norm()]])
        norms = []
        for v in self.vehicles:
            norms.append((0.0, float(bus.receive(CENTRAL, "x2c_norm", v.id).unpack([1])[0][0])))
        for ln in self.lanes:
            if ln.lane.active:
                norms.append((0.0, float(bus.receive(CENTRAL, "x2c_norm", ln.id).unpack([1])[0][0])))
            else:
                norms.append((0.0, 0.0))
        norms.append(multiplier_norms_central(self.prob, self.central.zc, self.central.dzc))
        nu = update_nu(nu, norms, self.config.nu_margin)
        self._broadcast("penalty", "c2x_nu", [[nu]])
        for v in self.vehicles:
            v.nu = float(self._recv_scalar(v.id, "c2x_nu")[0])
        for ln in self._active_lanes():
            ln.nu = float(self._recv_scalar(ln.id, "c2x_nu")[0])
        return nu

    def step_size(self, nu: float):
        bus, prob, kappa = self.bus, self.prob, self.config.kappa
        for v in self.vehicles:
            lay = v.lay
            if lay.a:
                bus.send(v.id, lane(lay.lane), "step_size", "v2l_step", [lane_payload(prob, v.i, v.dzv)])
        res_v = self._map(lambda v: v.step_quantities(kappa), self.vehicles)
        for v, (amax, part) in zip(self.vehicles, res_v):
            bus.send(v.id, CENTRAL, "step_size", "v2c_step", [[amax, part.value, part.slope], v.dzv[v.lay.sl_T]])
        for ln in self._active_lanes():
            ln.dpayloads = {i: bus.receive(ln.id, "v2l_step", vehicle(i)).unpack([prob.vehicles[i].a])[0]
                            for i in sorted(ln.lane.vehicles)}
            amax, part = ln.step_quantities(kappa)
            bus.send(ln.id, CENTRAL, "step_size", "l2c_step", [[amax, part.value, part.slope]])
        cen = self.central
        a_list, pv, pl = [], [], []
        for v in self.vehicles:
            hdr, dT = bus.receive(CENTRAL, "v2c_step", v.id).unpack([3, v.lay.n_T])
            a_list.append(float(hdr[0]))
            pv.append(MeritPart(float(hdr[1]), float(hdr[2])))
            if v.lay.n_T:
                cen.dT[v.i] = dT
        for ln in self.lanes:
            if ln.lane.active:
                hdr = bus.receive(CENTRAL, "l2c_step", ln.id).unpack([3])[0]
                a_list.append(float(hdr[0]))
                pl.append(MeritPart(float(hdr[1]), float(hdr[2])))
            else:
                a_list.append(alpha_max_lane(prob, ln.l, ln.zl, ln.dzl, kappa))
                pl.append(merit_lane(prob, ln.l, ln.zl, {}, nu, cen.tau, ln.dzl))
        a_list.append(alpha_max_central(prob, cen.zc, cen.dzc, kappa))
        pc = merit_central(prob, cen.zc, cen.T, nu, cen.tau, cen.dzc)
        return min(a_list), combine(pv, pl, pc), combine(pv, pl, pc, "slope")

    def line_search(self, nu: float, phi0: float, dphi: float, amax: float):
        bus, config = self.bus, self.config
        if not dphi < 0:
            raise DescentFailure(f"merit slope {dphi:g} is not negative")
        alpha = amax
        for j in range(config.max_ls):
            bus.round += 1
            self._broadcast("merit", "c2x_alpha", [[alpha]])
            alphas = {v.i: float(self._recv_scalar(v.id, "c2x_alpha")[0]) for v in self.vehicles}
            vals_v = self._map(lambda v: v.trial_merit(alphas[v.i]), self.vehicles)
            for v, val in zip(self.vehicles, vals_v):
                bus.send(v.id, CENTRAL, "merit", "v2c_merit", [[val]])
            for ln in self._active_lanes():
                a = float(self._recv_scalar(ln.id, "c2x_alpha")[0])
                bus.send(ln.id, CENTRAL, "merit", "l2c_merit", [[ln.trial_merit(a)]])
            pv = [MeritPart(float(bus.receive(CENTRAL, "v2c_merit", v.id).unpack([1])[0][0]))
                  for v in self.vehicles]
            pl = []
            for ln in self.lanes:
                if ln.lane.active:
                    pl.append(MeritPart(float(bus.receive(CENTRAL, "l2c_merit", ln.id).unpack([1])[0][0])))
                else:
                    pl.append(merit_lane(self.prob, ln.l, ln.zl + alpha * ln.dzl, {}, nu, self.central.tau))
            pc = MeritPart(self.central.trial_merit(alpha, nu))
            val = combine(pv, pl, pc)
            if val <= phi0 + alpha * config.gamma * dphi:
                return alpha, val, j + 1
            alpha *= config.beta
        raise LineSearchFailure(f"no sufficient decrease after {config.max_ls} trials")

    def commit_and_check(self, alpha: float, nu: float) -> float:
        bus = self.bus
        self._broadcast("control", "c2x_commit", [[alpha]])
        for v in self.vehicles:
            v.commit(float(self._recv_scalar(v.id, "c2x_commit")[0]))
        for ln in self._active_lanes():
            ln.commit(float(self._recv_scalar(ln.id, "c2x_commit")[0]))
        for ln in self.lanes:
            if not ln.lane.active:
                ln.zl = ln.zl + alpha * ln.dzl
        self.central.commit(alpha, nu)
        norms_v = self._map(lambda v: v.residual_norm(), self.vehicles)
        for v, r in zip(self.vehicles, norms_v):
            bus.send(v.id, CENTRAL, "control", "x2c_residual", [[r]])
        for ln in self._active_lanes():
            bus.send(ln.id, CENTRAL, "control", "x2c_residual", [[ln.residual_norm()]])
        mv = max((float(bus.receive(CENTRAL, "x2c_residual", v.id).unpack([1])[0][0]) for v in self.vehicles),
                 default=0.0)
        ml = max((float(bus.receive(CENTRAL, "x2c_residual", ln.id).unpack([1])[0][0])
                  for ln in self._active_lanes()), default=0.0)
        return max(mv, ml, self.central.residual_norm())

    def announce(self, tau: float, stop: bool) -> None:
        self._broadcast("control", "c2x_status", [[tau, float(stop)]])
        for v in self.vehicles:
            v.tau = float(self._recv_scalar(v.id, "c2x_status", 2)[0])
        for ln in self._active_lanes():
            ln.tau = float(self._recv_scalar(ln.id, "c2x_status", 2)[0])
        for ln in self.lanes:
            if not ln.lane.active:
                ln.tau = tau
        self.central.tau = tau

    def gather_iterate(self):
        from .kkt_core import Iterate
        return Iterate([v.zv.copy() for v in self.vehicles], [ln.zl.copy() for ln in self.lanes],
                       self.central.zc.copy(), self.central.tau)


def run_distributed_solve(problem: Problem | Scenario, config: SolverConfig | None = None, workers: int = 1,
                          keep_trace: bool = False) -> SolveResult:
    """Outer interior-point loop over the message bus; returns the monolithic result type plus a ledger."""
    config = config or SolverConfig()
    prob = problem if isinstance(problem, Problem) else Problem(problem)
    rt = DistributedRuntime(prob, config, workers)
    report = SolveReport()
    result = SolveResult(prob, rt.gather_iterate(), report, rt.bus.ledger)
    tau = config.tau0
    for node in rt.vehicles + rt.lanes:
        node.tau = tau
    rt.central.tau = tau
    nu = 0.0
    damp = 0.0
    try:
        for k in range(config.max_iter):
            if keep_trace:
                result.trace.append(rt.gather_iterate().flat())
            rt.bus.start_iteration(k)
            try:
                shift = damp
                for v in rt.vehicles:
                    v.shift = 0.0
                if damp:
                    rt.send_shift(damp)
                ladder = shifts_above(damp)
                for attempt in range(len(ladder) + 1):
                    rt.search_direction()
                    if config.nu_policy == "per_iteration" and attempt == 0:
                        nu = 0.0
                    nu = rt.penalty(nu)
                    amax, phi0, dphi = rt.step_size(nu)
                    if dphi < 0:
                        break
                    if attempt == len(ladder):
                        raise DescentFailure(f"iteration {k}: merit slope {dphi:g} after shift {shift:g}")
                    shift = ladder[attempt]
                    rt.bus.restart_phases()
                    rt.send_shift(shift)
                alpha, phi_new, trials = rt.line_search(nu, phi0, dphi, amax)
                damp = update_damping(damp, alpha, config.stall_alpha)
            except (SolverError, SingularBlock, RegularizationFailure, ContractViolation) as exc:
                report.status = type(exc).__name__
                report.iterations = k
                result.iterate = rt.gather_iterate()
                report.objective = total_objective(prob, result.iterate)
                if isinstance(exc, SolverError):
                    exc.result = result
                return result
            r_inf = rt.commit_and_check(alpha, nu)
            report.records.append(IterRecord(k, r_inf, rt.central.tau, alpha, amax, phi0, phi_new, dphi, nu, trials))
            report.iterations = k + 1
            report.r_inf, report.tau = r_inf, rt.central.tau
            stop = terminate(r_inf, rt.central.tau, config.eps, config.tau_min)
            tau_new = rt.central.tau if stop else barrier_update(rt.central.tau, r_inf, config.eta, config.tau_min)
            if tau_new != rt.central.tau and config.nu_policy == "per_barrier":
                nu = 0.0
            rt.announce(tau_new, stop)
            if stop:
                report.status = "converged"
                report.converged = True
                break
        else:
            report.status = "max_iterations"
    finally:
        rt.close()
    result.iterate = rt.gather_iterate()
    if keep_trace:
        result.trace.append(result.iterate.flat())
    report.objective = total_objective(prob, result.iterate)
    return result
