"""Parameterized rear-end constraints through a piecewise-linear separating trajectory.

Each adjacent pair on a lane gets a knot vector theta in R^q describing a
trajectory rho_k(theta) that the follower must stay behind and the leader
must stay ahead of, each with half of the safety margin.  Two placements of
theta are supported: ``primal`` (theta owned by the lane node) and ``dual``
(each vehicle owns copies tied together by consensus rows at the lane node).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np


class RecaMode(str, Enum):
    EXACT = "exact"
    PRIMAL = "primal"
    DUAL = "dual"


DEFAULT_Q = 4


def knot_layout(K: int, q: int = DEFAULT_Q) -> tuple[list[int], int]:
    """Knot indices 0, s, 2s, ... (q-1 of them) with s = floor(K/(q-1)), and the last segment length ceil(K/(q-1))."""
    if q < 2:
        raise ValueError("need q >= 2")
    s = K // (q - 1)
    if s < 1:
        raise ValueError(f"K={K} too short for {q} knots")
    return [j * s for j in range(q - 1)], math.ceil(K / (q - 1))


def rho_weights(k: int, K: int, q: int = DEFAULT_Q, literal: bool = False) -> np.ndarray:
    """Interpolation row w with rho_k(theta) = w @ theta.

    Interior segments interpolate between consecutive knots.  The last
    segment starts at knot q-1 with slope (theta_q - theta_{q-1}) / ceil(K/(q-1));
    ``literal=True`` uses theta_q - theta_1 in that slope instead, which
    breaks continuity and is kept only for comparison.
    """
    if not 0 <= k <= K + 1:
        raise ValueError(f"k={k} outside [0, {K + 1}]")
    knots, last_len = knot_layout(K, q)
    s = knots[1] if len(knots) > 1 else last_len
    w = np.zeros(q)
    seg = q - 2
    for j in range(q - 2):
        if k <= knots[j + 1]:
            seg = j
            break
    if seg < q - 2:
        frac = (k - knots[seg]) / s
        w[seg] += 1.0 - frac
        w[seg + 1] += frac
        return w
    frac = (k - knots[q - 2]) / last_len
    w[q - 2] += 1.0
    w[q - 1] += frac
    w[0 if literal else q - 2] -= frac
    return w


def rho_matrix(K: int, q: int = DEFAULT_Q, literal: bool = False) -> np.ndarray:
    """Stacked weights for k = 0..K, shape (K+1, q)."""
    return np.array([rho_weights(k, K, q, literal) for k in range(K + 1)])


def rho_eval(theta, k: int, K: int, literal: bool = False) -> tuple[float, np.ndarray]:
    """Value of rho_k(theta) and its gradient with respect to theta."""
    theta = np.asarray(theta, dtype=float)
    w = rho_weights(k, K, theta.size, literal)
    return float(w @ theta), w


def fit_theta(track, K: int, q: int = DEFAULT_Q) -> np.ndarray:
    """Knot values sampled from a (K+1,) trajectory at the knot indices and the horizon end."""
    knots, last_len = knot_layout(K, q)
    idx = knots + [min(knots[-1] + last_len, K)]
    return np.asarray(track, dtype=float)[idx].copy()


# ---- problem builders and evaluation ----

def build_primal_problem(scenario, q: int = DEFAULT_Q, literal: bool = False):
    """Problem structure with theta owned by the lane nodes."""
    from .problem import Problem
    return Problem(scenario, RecaMode.PRIMAL, q=q, rho_literal=literal)


def build_dual_problem(scenario, q: int = DEFAULT_Q, literal: bool = False):
    """Problem structure with per-vehicle theta copies and lane consensus rows."""
    from .problem import Problem
    return Problem(scenario, RecaMode.DUAL, q=q, rho_literal=literal)


@dataclass
class SuboptimalityResult:
    gap: float | None
    j_exact: float | None
    j_param: float | None
    status_exact: str
    status_param: str
    reca_violation: float | None
    v2l_floats_exact: int = 0
    v2l_floats_param: int = 0


def exact_reca_violation(scenario, solution_w) -> float:
    """Largest value of p_i + delta_i - p_{i+1} over all lanes and nodes."""
    from .transcription import pos_idx, reca_constraints
    worst = -np.inf
    for l, lane in enumerate(scenario.lanes):
        if len(lane) < 2:
            continue
        tracks = [solution_w[i][pos_idx(scenario.K)] for i in lane]
        worst = max(worst, float(np.max(reca_constraints(scenario, l, tracks).value)))
    return float(worst)


def suboptimality(scenario, config=None, mode: RecaMode | str = RecaMode.PRIMAL, q: int = DEFAULT_Q,
                  distributed: bool = False) -> SuboptimalityResult:
    """Relative objective increase caused by the parameterized rear-end constraints."""
    from .pdip_solver import SolverConfig
    from .problem import Problem
    config = config or SolverConfig()
    mode = RecaMode(mode)
    if distributed:
        from .coordination_net import run_distributed_solve as runner
    else:
        from .pdip_solver import solve as runner
    ex = runner(Problem(scenario, RecaMode.EXACT), config)
    pa = runner(Problem(scenario, mode, q=q), config)
    gap = None
    viol = None
    if pa.report.converged:
        viol = exact_reca_violation(scenario, pa.iterate_w())
    if ex.report.converged and pa.report.converged:
        je, jp = ex.report.objective, pa.report.objective
        gap = (jp - je) / abs(je) if je != 0 else jp - je
    out = SuboptimalityResult(gap, ex.report.objective, pa.report.objective, ex.report.status,
                              pa.report.status, viol)
    if ex.ledger is not None and pa.ledger is not None:
        out.v2l_floats_exact = ex.ledger.first_iteration_floats("search_direction", "vehicle", "lane")
        out.v2l_floats_param = pa.ledger.first_iteration_floats("search_direction", "vehicle", "lane")
    return out
