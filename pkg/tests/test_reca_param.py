from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import small_scenario
from intersection_pdip.pdip_solver import SolverConfig, solve
from intersection_pdip.problem import Problem
from intersection_pdip.reca_param import (
    RecaMode, build_dual_problem, build_primal_problem, exact_reca_violation, fit_theta, knot_layout, rho_eval,
    rho_matrix, rho_weights, suboptimality,
)

CFG = SolverConfig(eps=1e-8)


def test_knot_layout_examples():
    assert knot_layout(100) == ([0, 33, 66], 34)
    assert knot_layout(60) == ([0, 20, 40], 20)
    with pytest.raises(ValueError):
        knot_layout(2, 4)
    with pytest.raises(ValueError):
        knot_layout(10, 1)


def test_rho_hits_knot_values():
    theta = np.array([1.0, 4.0, -2.0, 7.0])
    for k, want in ((0, 1.0), (33, 4.0), (66, -2.0), (100, 7.0)):
        assert rho_eval(theta, k, 100)[0] == pytest.approx(want)


@given(st.integers(6, 200), st.integers(0, 1000))
def test_rho_continuous(K, seed):
    theta = np.random.default_rng(seed).normal(size=4)
    vals = rho_matrix(K) @ theta
    jumps = np.abs(np.diff(vals))
    # piecewise linear with bounded slope: no jump exceeds the largest knot-to-knot slope
    knots, last = knot_layout(K)
    bound = np.max(np.abs(np.diff(theta))) / min(knots[1], last) + 1e-12
    assert np.all(jumps <= bound)


def test_literal_last_segment_breaks_continuity():
    theta = np.array([10.0, 0.0, 0.0, 0.0])
    lit = rho_matrix(60, literal=True) @ theta
    assert abs(lit[41] - lit[40]) > 0.4
    assert np.allclose(rho_matrix(60) @ theta, np.r_[10 - 0.5 * np.arange(21), np.zeros(40)])


@given(st.integers(0, 60), st.integers(0, 1000))
def test_rho_gradient_fd(k, seed):
    theta = np.random.default_rng(seed).normal(size=4)
    val, grad = rho_eval(theta, k, 60)
    fd = np.array([(rho_eval(theta + e, k, 60)[0] - rho_eval(theta - e, k, 60)[0]) / 2e-6
                   for e in 1e-6 * np.eye(4)])
    assert np.allclose(grad, fd, rtol=1e-6, atol=1e-8)
    assert rho_weights(k, 60).sum() == pytest.approx(1.0)


@given(st.sampled_from([30, 60, 99, 100]), st.floats(-50, 50), st.floats(0, 30))
def test_fit_theta_reproduces_linear_track(K, p0, v):
    track = p0 + v * np.arange(K + 1)
    theta = fit_theta(track, K)
    assert np.allclose(rho_matrix(K) @ theta, track, atol=1e-9 * (1 + abs(p0) + v * K))


def test_builders_set_mode():
    scn = small_scenario()
    assert build_primal_problem(scn).mode is RecaMode.PRIMAL
    assert build_dual_problem(scn).mode is RecaMode.DUAL


@pytest.fixture(scope="module")
def lane_scn():
    return small_scenario(seed=3, n_lanes=2, per_lane=2, K=30)


def test_parameterized_solution_is_rear_end_safe(lane_scn):
    for mode in ("primal", "dual"):
        res = solve(Problem(lane_scn, mode), CFG)
        assert res.report.converged
        assert exact_reca_violation(lane_scn, res.iterate_w()) <= 1e-6


def test_primal_and_dual_agree(lane_scn):
    a = solve(Problem(lane_scn, "primal"), CFG)
    b = solve(Problem(lane_scn, "dual"), CFG)
    assert a.report.converged and b.report.converged
    assert a.report.objective == pytest.approx(b.report.objective, rel=1e-4)


def test_suboptimality_small_case(lane_scn):
    out = suboptimality(lane_scn, CFG.with_(eps=1e-10), "primal", distributed=True)
    assert out.status_exact == out.status_param == "converged"
    assert out.gap >= -1e-6
    assert out.reca_violation <= 1e-6
    assert out.v2l_floats_param < out.v2l_floats_exact


def test_rho_small_horizon_examples():
    theta = np.array([0.0, 3.0, 6.0, 10.0])
    assert rho_eval(theta, 5, 9)[0] == pytest.approx(5.0)
    assert rho_eval(theta, 7, 9)[0] == pytest.approx(22.0 / 3.0)
