"""Structural layout of the partitioned primal-dual problem.

Everything here is constant during a solve: variable offsets per vehicle,
the coupling maps between vehicles and lane/central nodes, and the constant
matrices those maps are built from.

Vehicle block z^v = (y, lambda, mu, s) with y = (w, T[, theta copies]).  Rows
of the vehicle residual follow the same order: stationarity, equality rows,
inequality rows h + s, complementarity.  A coupling column set A_i (n_z x a_i)
links the vehicle to its lane node, and segments describe how those a_i
columns scatter into the lane variables.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .reca_param import DEFAULT_Q, RecaMode, rho_matrix
from .transcription import Scenario, n_path, n_w, pos_idx, sica_matrix

LANE_THETA_REG = 1e-6


@dataclass(frozen=True)
class Segment:
    """Lane variables [lane_offset, lane_offset+length) map to A-columns [local_offset, ...) with a sign."""

    lane_offset: int
    length: int
    sign: float
    local_offset: int


@dataclass
class VehicleLayout:
    i: int
    lane: int
    slot: int
    K: int
    n_T: int
    T_off: int
    has_front: bool  # a leader drives ahead on the same lane
    has_rear: bool   # a follower drives behind on the same lane
    n_theta_front: int = 0
    n_theta_rear: int = 0
    n_front: int = 0
    n_rear: int = 0
    n_hor: int = 0   # crossing-time horizon rows T <= K dt - T_CLIP
    front_const: float = 0.0
    rear_const: float = 0.0
    A: np.ndarray = field(default=None, repr=False)
    segments: tuple[Segment, ...] = ()

    @property
    def n_w(self) -> int:
        return n_w(self.K)

    @property
    def n_y(self) -> int:
        return self.n_w + self.n_T + self.n_theta_rear + self.n_theta_front

    @property
    def n_g(self) -> int:
        return 2 * (self.K + 1) + self.n_T

    @property
    def n_path(self) -> int:
        return n_path(self.K)

    @property
    def n_h(self) -> int:
        return self.n_path + self.n_front + self.n_rear + self.n_hor

    @property
    def n_z(self) -> int:
        return self.n_y + self.n_g + 2 * self.n_h

    @property
    def a(self) -> int:
        return 0 if self.A is None else self.A.shape[1]

    # slices inside z^v
    @property
    def sl_y(self):
        return slice(0, self.n_y)

    @property
    def sl_lam(self):
        return slice(self.n_y, self.n_y + self.n_g)

    @property
    def sl_mu(self):
        o = self.n_y + self.n_g
        return slice(o, o + self.n_h)

    @property
    def sl_s(self):
        o = self.n_y + self.n_g + self.n_h
        return slice(o, o + self.n_h)

    # slices inside y
    @property
    def sl_w(self):
        return slice(0, self.n_w)

    @property
    def sl_T(self):
        return slice(self.n_w, self.n_w + self.n_T)

    @property
    def sl_theta_rear(self):
        o = self.n_w + self.n_T
        return slice(o, o + self.n_theta_rear)

    @property
    def sl_theta_front(self):
        o = self.n_w + self.n_T + self.n_theta_rear
        return slice(o, o + self.n_theta_front)

    # slices inside h
    @property
    def sl_front(self):
        return slice(self.n_path, self.n_path + self.n_front)

    @property
    def sl_rear(self):
        o = self.n_path + self.n_front
        return slice(o, o + self.n_rear)

    @property
    def sl_hor(self):
        return slice(self.n_h - self.n_hor, self.n_h)


@dataclass
class LaneLayout:
    l: int
    vehicles: tuple[int, ...]       # lane order, rear to front
    n_rows: int                     # coupling rows (gap rows, theta entries or consensus rows)
    n_z: int                        # lane variables
    const: np.ndarray = field(repr=False, default=None)  # gap-row offsets (exact mode)
    T_cols: np.ndarray = field(repr=False, default=None)  # global T columns in lane-T order
    T_local: dict = field(default_factory=dict)           # vehicle -> offset in lane-T space

    @property
    def active(self) -> bool:
        return self.n_z > 0

    @property
    def n_TL(self) -> int:
        return 0 if self.T_cols is None else self.T_cols.size


class Problem:
    """Scenario plus RECA handling mode and every derived constant structure."""

    def __init__(self, scenario: Scenario, mode: RecaMode | str = RecaMode.EXACT, q: int = DEFAULT_Q,
                 rho_literal: bool = False, time_box: bool = True):
        self.scenario = scenario
        self.time_box = time_box
        self.mode = RecaMode(mode)
        self.q = q
        self.rho_literal = rho_literal
        K = scenario.K
        self.K = K
        self.R = rho_matrix(K, q, rho_literal) if self.mode is not RecaMode.EXACT else None
        self.C = sica_matrix(scenario)
        self.n_C = self.C.shape[0]
        T_offs = np.cumsum([0] + [scenario.n_T(i) for i in range(scenario.n_vehicles)])
        self.T_offs = T_offs
        self.vehicles: list[VehicleLayout] = []
        slot_of = {}
        for l, lane in enumerate(scenario.lanes):
            for m, i in enumerate(lane):
                slot_of[i] = (l, m, len(lane))
        for i in range(scenario.n_vehicles):
            l, m, n = slot_of[i]
            self.vehicles.append(self._vehicle_layout(i, l, m, n, int(T_offs[i])))
        self.lanes = [self._lane_layout(l) for l in range(scenario.n_lanes)]

    # ---- construction helpers ----

    def _vehicle_layout(self, i, l, m, n, T_off) -> VehicleLayout:
        scn, K, q = self.scenario, self.K, self.q
        lay = VehicleLayout(i=i, lane=l, slot=m, K=K, n_T=scn.n_T(i), T_off=T_off,
                            has_front=m < n - 1, has_rear=m > 0)
        if self.time_box:
            lay.n_hor = lay.n_T
        lane = scn.lanes[l]
        if self.mode is not RecaMode.EXACT:
            if lay.has_front:
                lay.n_front = K + 1
                lay.front_const = scn.vehicles[i].params.delta / 2.0
            if lay.has_rear:
                lay.n_rear = K + 1
                lay.rear_const = scn.vehicles[lane[m - 1]].params.delta / 2.0
            if self.mode is RecaMode.DUAL:
                lay.n_theta_front = q if lay.has_front else 0
                lay.n_theta_rear = q if lay.has_rear else 0
        if n < 2:
            lay.A = np.zeros((lay.n_z, 0))
            return lay

        segs = []
        if self.mode is RecaMode.EXACT:
            A = np.zeros((lay.n_z, K + 1))
            A[pos_idx(K), np.arange(K + 1)] = 1.0
            if lay.has_front:
                segs.append(Segment(m * (K + 1), K + 1, 1.0, 0))
            if lay.has_rear:
                segs.append(Segment((m - 1) * (K + 1), K + 1, -1.0, 0))
        else:
            n_slots = int(lay.has_front) + int(lay.has_rear)
            A = np.zeros((lay.n_z, q * n_slots))
            col = 0
            h0 = lay.n_y + lay.n_g
            if lay.has_rear:
                if self.mode is RecaMode.PRIMAL:
                    rows = h0 + np.arange(lay.sl_rear.start, lay.sl_rear.stop)
                    A[rows, col:col + q] = self.R
                else:
                    rows = np.arange(lay.sl_theta_rear.start, lay.sl_theta_rear.stop)
                    A[rows, col + np.arange(q)] = -1.0
                segs.append(Segment((m - 1) * q, q, 1.0, col))
                col += q
            if lay.has_front:
                if self.mode is RecaMode.PRIMAL:
                    rows = h0 + np.arange(lay.sl_front.start, lay.sl_front.stop)
                    A[rows, col:col + q] = -self.R
                else:
                    rows = np.arange(lay.sl_theta_front.start, lay.sl_theta_front.stop)
                    A[rows, col + np.arange(q)] = 1.0
                segs.append(Segment(m * q, q, 1.0, col))
        lay.A = A
        lay.segments = tuple(segs)
        return lay

    def _lane_layout(self, l) -> LaneLayout:
        scn, K = self.scenario, self.K
        lane = scn.lanes[l]
        n = len(lane)
        if n < 2:
            return LaneLayout(l, tuple(lane), 0, 0, np.zeros(0), np.zeros(0, dtype=int), {})
        if self.mode is RecaMode.EXACT:
            n_rows = (n - 1) * (K + 1)
            const = np.concatenate([np.full(K + 1, scn.vehicles[lane[m]].params.delta) for m in range(n - 1)])
            n_z = 2 * n_rows
        else:
            n_rows = (n - 1) * self.q
            const = np.zeros(n_rows)
            n_z = n_rows
        cols, local, off = [], {}, 0
        for i in lane:
            local[i] = off
            nT = scn.n_T(i)
            cols.extend(range(self.T_offs[i], self.T_offs[i] + nT))
            off += nT
        return LaneLayout(l, tuple(lane), n_rows, n_z, const, np.array(cols, dtype=int), local)

    # ---- convenience ----

    @property
    def n_vehicles(self) -> int:
        return len(self.vehicles)

    @property
    def n_lanes(self) -> int:
        return len(self.lanes)

    def C_i(self, i: int) -> np.ndarray:
        lay = self.vehicles[i]
        return self.C[:, lay.T_off: lay.T_off + lay.n_T]

    def lane_has_bounds(self, l: int) -> bool:
        """Lane variables include (mu, s) pairs only for exact gap rows."""
        return self.mode is RecaMode.EXACT and self.lanes[l].active

    def lane_matrix(self, l: int, mu_s=None) -> np.ndarray:
        """Diagonal lane block M^L before the Schur update."""
        lane = self.lanes[l]
        n = lane.n_rows
        if self.mode is RecaMode.EXACT:
            mu, s = mu_s
            M = np.zeros((2 * n, 2 * n))
            idx = np.arange(n)
            M[idx, n + idx] = 1.0
            M[n + idx, idx] = 1.0
            M[n + idx, n + idx] = mu / s
            return M
        if self.mode is RecaMode.PRIMAL:
            return LANE_THETA_REG * np.eye(n)
        return np.zeros((n, n))

    def dims(self) -> dict:
        return {
            "vehicles": [v.n_z for v in self.vehicles],
            "lanes": [ln.n_z for ln in self.lanes],
            "central": 2 * self.n_C,
            "total": sum(v.n_z for v in self.vehicles) + sum(ln.n_z for ln in self.lanes) + 2 * self.n_C,
        }


# ---- coupling kernels shared by every solve path ----

def gather_coupling(lay: VehicleLayout, lane_vec) -> np.ndarray:
    """E_i^T v: pull a lane vector (or its raw segment slices) into the vehicle's a_i columns.

    ``lane_vec`` is either the full lane vector or a list of per-segment slices.
    """
    out = np.zeros(lay.a)
    for n, seg in enumerate(lay.segments):
        if isinstance(lane_vec, (list, tuple)):
            sl = lane_vec[n]
        else:
            sl = lane_vec[seg.lane_offset: seg.lane_offset + seg.length]
        out[seg.local_offset: seg.local_offset + seg.length] += seg.sign * sl
    return out


def segment_slices(lay: VehicleLayout, lane_vec) -> list[np.ndarray]:
    return [np.array(lane_vec[s.lane_offset: s.lane_offset + s.length]) for s in lay.segments]


def scatter_coupling(lay: VehicleLayout, vec, out: np.ndarray) -> None:
    """out += E_i vec."""
    for seg in lay.segments:
        out[seg.lane_offset: seg.lane_offset + seg.length] += seg.sign * vec[seg.local_offset: seg.local_offset + seg.length]


def scatter_coupling_matrix(lay: VehicleLayout, D: np.ndarray, out: np.ndarray, scale: float = 1.0) -> None:
    """out += scale * E_i D E_i^T."""
    for sa in lay.segments:
        for sb in lay.segments:
            blk = D[sa.local_offset: sa.local_offset + sa.length, sb.local_offset: sb.local_offset + sb.length]
            out[sa.lane_offset: sa.lane_offset + sa.length,
                sb.lane_offset: sb.lane_offset + sb.length] += (scale * sa.sign * sb.sign) * blk


def scatter_coupling_rows(lay: VehicleLayout, X: np.ndarray, out: np.ndarray, cols: slice) -> None:
    """out[:, cols] += E_i X."""
    for seg in lay.segments:
        out[seg.lane_offset: seg.lane_offset + seg.length, cols] += seg.sign * X[seg.local_offset: seg.local_offset + seg.length]


def apply_CT(C_i: np.ndarray, v: np.ndarray) -> np.ndarray:
    """C_i^T v with a fixed ascending-row summation order."""
    out = np.zeros(C_i.shape[1])
    for r in range(C_i.shape[0]):
        row = C_i[r]
        if np.any(row):
            out += row * v[r]
    return out


def sym_from_lower(M: np.ndarray) -> np.ndarray:
    """Symmetric matrix rebuilt from the lower triangle (what gets serialized)."""
    L = np.tril(M)
    return L + np.tril(M, -1).T
