from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import small_scenario
from intersection_pdip.hier_linalg import search_direction
from intersection_pdip.kkt_core import assemble_vehicle_block, vehicle_coupling_inputs
from intersection_pdip.pdip_solver import (
    DescentFailure, LineSearchFailure, SolverConfig, alpha_max_entries, alpha_max_horizon, armijo_backtrack,
    barrier_update, fraction_to_boundary, merit, shifts_above, solve, terminate, trial_iterate, update_damping,
    update_nu, _multiplier_norms,
)
from intersection_pdip.problem import Problem
from intersection_pdip.reference_oracle import centralized_pdip, random_interior_iterate
from intersection_pdip.transcription import T_CLIP

CFG = SolverConfig()


# ---- scalar rules ----

def test_update_nu_examples():
    assert update_nu(0.0, [(5.0, 3.0)], 1.1) == pytest.approx(3.3)
    assert update_nu(0.0, [(0.1, 0.2)], 1.1) == 1.0
    assert update_nu(4.0, [(0.0, 2.0)], 1.1) == 4.0
    assert update_nu(0.0, [], 1.1) == 1.0


def test_update_nu_uses_new_multipliers_only():
    assert update_nu(0.0, [(100.0, 2.0)], 1.0) == 2.0


@given(st.floats(0, 1e3), st.lists(st.tuples(st.floats(0, 1e3), st.floats(0, 1e3)), max_size=5))
def test_update_nu_monotone(nu, norms):
    assert update_nu(nu, norms, 1.1) >= max(nu, 1.0)


def test_barrier_update_examples():
    assert barrier_update(1.0, 0.5, 0.2, 0.0) == pytest.approx(0.2)
    assert barrier_update(1.0, 2.0, 0.2, 0.0) == 1.0
    assert barrier_update(1e-2, 1e-3, 0.2, 1e-2) == 1e-2
    assert barrier_update(1.0, 1.0, 0.2, 0.0) == 1.0  # strict inequality


def test_terminate_examples():
    assert terminate(1e-7, 1e-7, 1e-6)
    assert not terminate(1e-5, 1e-7, 1e-6)
    assert not terminate(1e-7, 1e-3, 1e-6)
    assert terminate(1e-7, 1e-2, 1e-6, tau_min=1e-2)
    assert not terminate(1e-7, 2e-2, 1e-6, tau_min=1e-2)


def test_damping_ladder():
    assert shifts_above(0.0)[0] == 1e-4 and shifts_above(1e6) == ()
    assert shifts_above(1.0) == (1e2, 1e4, 1e6)
    assert update_damping(0.0, 1e-5, 1e-3) == 1e-4
    assert update_damping(1e-2, 1e-5, 1e-3) == 1.0
    assert update_damping(1e6, 1e-5, 1e-3) == 1e6
    assert update_damping(1.0, 0.1, 1e-3) == 1.0  # moderate steps keep the damping
    assert update_damping(1.0, 1.0, 1e-3) == 1e-2
    assert update_damping(1e-4, 0.9, 1e-3) == 0.0
    assert update_damping(0.0, 1e-9, 0.0) == 0.0  # disabled


def test_config_validation():
    for bad in ({"eta": 1.0}, {"gamma": 0.0}, {"beta": 1.0}, {"kappa": 0.0}, {"tau_min": 2.0},
                {"hessian_mode": "newton"}, {"nu_policy": "never"}, {"stall_alpha": 1.0}):
        with pytest.raises(ValueError):
            SolverConfig(**bad)
    assert CFG.with_(eps=1e-8).eps == 1e-8


# ---- step size ----

def test_alpha_max_entries_example():
    assert alpha_max_entries(np.array([1.0, 1.0]), np.array([-2.0, 1.0]), 0.01) == pytest.approx(0.495)
    assert alpha_max_entries(np.array([1.0]), np.array([3.0]), 0.01) == 1.0
    assert alpha_max_entries(np.zeros(0), np.zeros(0), 0.01) == 1.0


@given(st.integers(0, 10_000))
def test_alpha_max_keeps_fraction(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.01, 5.0, 20)
    dx = rng.normal(scale=10.0, size=20)
    a = alpha_max_entries(x, dx, 0.01)
    assert 0 < a <= 1
    assert np.all(x + a * dx >= 0.01 * x - 1e-12)


def test_alpha_max_horizon():
    K, dt = 10, 0.2
    T = np.array([1.0])
    assert alpha_max_horizon(T, np.array([-10.0]), K, dt, 0.01) == pytest.approx(0.99 * (1.0 - T_CLIP) / 10.0)
    assert alpha_max_horizon(T, np.array([10.0]), K, dt, 0.01) == pytest.approx(0.99 * (2.0 - T_CLIP - 1.0) / 10.0)
    # an entry already on the clip bound does not block the step
    assert alpha_max_horizon(np.array([T_CLIP]), np.array([-1.0]), K, dt, 0.01) == 1.0


def test_armijo_backtracks():
    alpha, val, trials = armijo_backtrack(lambda a: 1 - 2 * a + 10 * a * a, 1.0, -2.0, 1.0, CFG)
    assert alpha == 0.125 and trials == 4
    assert val == pytest.approx(1 - 0.25 + 10 / 64)


def test_armijo_full_step():
    alpha, _, trials = armijo_backtrack(lambda a: (1 - a) ** 2, 1.0, -2.0, 1.0, CFG)
    assert alpha == 1.0 and trials == 1


def test_armijo_failures():
    with pytest.raises(DescentFailure):
        armijo_backtrack(lambda a: 0.0, 1.0, 0.0, 1.0, CFG)
    with pytest.raises(LineSearchFailure):
        armijo_backtrack(lambda a: 2.0, 1.0, -1.0, 1.0, CFG.with_(max_ls=5))


# ---- merit ----

def _direction(prob, it):
    blocks = [assemble_vehicle_block(prob, lay.i, it.zv[lay.i], *vehicle_coupling_inputs(prob, it, lay.i), it.tau,
                                     "gauss_newton") for lay in prob.vehicles]
    return search_direction(prob, it, blocks)


@pytest.mark.parametrize("mode", ("exact", "primal", "dual"))
def test_merit_directional_derivative_fd(mode):
    prob = Problem(small_scenario(seed=8), mode)
    rng = np.random.default_rng(11)
    for _ in range(4):
        it = random_interior_iterate(prob, rng)
        d = _direction(prob, it)
        nu = update_nu(0.0, _multiplier_norms(prob, it, d), 1.1)
        _, slope, _ = merit(prob, it, nu, d)
        h = 1e-6 * min(1.0, fraction_to_boundary(prob, it, d, 0.01))
        fd = (merit(prob, trial_iterate(prob, it, d, h), nu)[0]
              - merit(prob, trial_iterate(prob, it, d, -h), nu)[0]) / (2 * h)
        assert abs(fd - slope) <= 1e-6 * max(1.0, abs(slope))
        assert slope < 0


# ---- full solves ----

def test_small_solve_converges_with_armijo_and_interiority():
    res = solve(small_scenario(seed=3), CFG, keep_trace=True)
    rep = res.report
    assert rep.status == "converged" and rep.converged
    assert rep.r_inf < CFG.eps and rep.tau < CFG.eps
    for r in rep.records:
        assert 0 < r.alpha <= r.alpha_max <= 1
        assert r.merit_new <= r.merit + r.alpha * CFG.gamma * r.dphi
    it = res.iterate
    for z, lay in zip(it.zv, res.problem.vehicles):
        assert np.all(z[lay.sl_s] > 0) and np.all(z[lay.sl_mu] > 0)
    assert len(res.trace) == rep.iterations + 1


def test_max_iterations_status():
    res = solve(small_scenario(seed=3), CFG.with_(max_iter=2))
    assert res.report.status == "max_iterations"
    assert not res.report.converged
    assert res.report.iterations == 2
    assert math.isfinite(res.report.objective)


@pytest.mark.parametrize("policy", ("per_barrier", "monotone"))
def test_penalty_policies_agree(policy):
    scn = small_scenario(seed=4)
    a = solve(scn, CFG)
    b = solve(scn, CFG.with_(nu_policy=policy))
    assert a.report.converged and b.report.converged
    assert a.report.objective == pytest.approx(b.report.objective, rel=1e-4)


def test_forced_damping_still_converges():
    scn = small_scenario(seed=4)
    a = solve(scn, CFG)
    b = solve(scn, CFG.with_(stall_alpha=0.9))
    assert b.report.converged
    assert b.report.objective == pytest.approx(a.report.objective, rel=1e-4)


def test_matches_centralized_oracle():
    prob = Problem(small_scenario(seed=3))
    ours = solve(prob, CFG)
    ref = centralized_pdip(prob, CFG)
    assert ref.report.converged
    assert ours.report.objective == pytest.approx(ref.report.objective, rel=1e-5)


def test_tau_floor_stops_early():
    scn = small_scenario(seed=3)
    full = solve(scn, CFG)
    floor = solve(scn, CFG.with_(tau_min=1e-2))
    assert floor.report.converged
    assert floor.report.iterations < full.report.iterations
    assert floor.report.tau == 1e-2
