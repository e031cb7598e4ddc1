from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from intersection_pdip.reference_oracle import finite_difference_jacobian
from intersection_pdip.scenario_io import reference_scenario
from intersection_pdip.transcription import (
    CzCrossing, Scenario, ScenarioError, Vehicle, default_crossing_order, equality_constraints, initial_guess,
    lqr_terminal_weight, n_path, n_w, objective, path_constraints, pos_idx, reca_constraints, sica_constraints,
    split_w, stage_weights, vel_idx,
)
from intersection_pdip.vehicle_model import DEFAULT_PARAMS, DomainError, reference_input, rk4_step

V_REF = 70.0 / 3.6


def one_lane(p0s, K=60, dt=0.2, zones=((0, 0.0, 9.0),), order=()):
    vehicles = tuple(Vehicle(0, p, V_REF, V_REF) for p in p0s)
    lane = tuple(sorted(range(len(p0s)), key=lambda n: p0s[n]))
    cr = tuple(CzCrossing(c, a, b) for c, a, b in zones)
    return Scenario(dt, K, vehicles, (lane,), (cr,), order)


def two_lanes(d0=100.0, d1=80.0, K=60):
    v = (Vehicle(0, -d0, V_REF, V_REF), Vehicle(1, -d1, V_REF, V_REF))
    cr = ((CzCrossing(0, 0.0, 9.0),), (CzCrossing(0, 0.0, 9.0),))
    return Scenario(0.2, K, v, ((0,), (1,)), cr, ())


def random_w(rng, K):
    w = np.empty(n_w(K))
    xs = np.column_stack([np.linspace(-60, 30, K + 1) + rng.normal(size=K + 1), rng.uniform(5, 30, K + 1)])
    us = rng.uniform([-300, 0], [300, 5000], (K, 2))
    w[: 4 * K].reshape(K, 4)[:, :2] = xs[:K]
    w[: 4 * K].reshape(K, 4)[:, 2:] = us
    w[4 * K:] = xs[K]
    return w


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1.0))


# ---- equality constraints ----

def test_guess_is_feasible_for_dynamics():
    scn = one_lane([-100.0])
    g = initial_guess(scn)
    ev = equality_constraints(scn, 0, g.w[0], g.T[0])
    assert ev.value.size == 2 * (scn.K + 1) + 2
    assert np.max(np.abs(ev.value)) <= 1e-10


def test_entry_time_closed_form():
    g = initial_guess(one_lane([-100.0]))
    assert g.T[0][0] == pytest.approx(100.0 / V_REF, abs=1e-9)
    assert g.T[0][0] == pytest.approx(5.1429, abs=1e-4)


def test_state_perturbation_is_local():
    scn = one_lane([-100.0])
    g = initial_guess(scn)
    base = equality_constraints(scn, 0, g.w[0], g.T[0]).value
    w = g.w[0].copy()
    w[4 * 5] += 1.0  # position of node 5
    changed = np.flatnonzero(equality_constraints(scn, 0, w, g.T[0]).value != base)
    # position rows of the defects ending at and starting from node 5
    assert list(changed) == [2 + 2 * 4, 2 + 2 * 5]


def test_crossing_time_outside_horizon():
    scn = one_lane([-100.0])
    g = initial_guess(scn)
    with pytest.raises(DomainError):
        equality_constraints(scn, 0, g.w[0], np.array([1.0, scn.K * scn.dt + 0.1]))


@pytest.mark.parametrize("seed", range(20))
def test_equality_jacobian_matches_differences(seed):
    rng = np.random.default_rng(seed)
    scn = one_lane([-60.0], K=12)
    w = random_w(rng, scn.K)
    T = np.sort(rng.uniform(0.3, 2.1, 2))
    for t in T:  # keep the stencil inside one interval
        k = int(t / scn.dt)
        assert 1e-4 < t - k * scn.dt < scn.dt - 1e-4 or pytest.skip("time too close to a node")
    ev = equality_constraints(scn, 0, w, T)
    J = finite_difference_jacobian(lambda z: equality_constraints(scn, 0, z[: w.size], z[w.size:]).value,
                                   np.r_[w, T], 1e-5)
    assert rel_err(ev.jac, J) <= 1e-6


# ---- path constraints ----

def test_path_row_count_and_interior():
    K = 10
    scn = one_lane([-60.0], K=K)
    w = np.zeros(n_w(K))
    w[vel_idx(K)] = V_REF
    h = path_constraints(scn, 0, w).value
    assert h.size == n_path(K) == 5 * K + 2 * (K + 1)
    brake_lower = slice(3 * K, 4 * K)  # -Fb <= 0 sits on its bound when Fb = 0
    assert np.all(h[brake_lower] == 0.0)
    assert np.all(np.delete(h, np.arange(3 * K, 4 * K)) < 0)


def test_speed_limit_row_active():
    K = 10
    scn = one_lane([-60.0], K=K)
    w = np.zeros(n_w(K))
    w[vel_idx(K)] = V_REF
    w[vel_idx(K)[3]] = DEFAULT_PARAMS.v_max
    h = path_constraints(scn, 0, w).value
    assert h[5 * K + (K + 1) + 3] == 0.0


@pytest.mark.parametrize("seed", range(20))
def test_path_jacobian_matches_differences(seed):
    rng = np.random.default_rng(100 + seed)
    scn = one_lane([-60.0], K=8)
    w = random_w(rng, 8)
    J = finite_difference_jacobian(lambda z: path_constraints(scn, 0, z).value, w, 1e-5)
    assert rel_err(path_constraints(scn, 0, w).jac, J) <= 1e-6


# ---- lane and central stacks ----

def test_reca_values_and_structure():
    K = 5
    scn = one_lane([-100.0, -80.0], K=K)
    ev = reca_constraints(scn, 0, [np.full(K + 1, 10.0), np.full(K + 1, 20.0)])
    assert np.allclose(ev.value, -3.0)
    assert ev.value.size == K + 1
    for row in ev.jac:
        nz = row[row != 0]
        assert sorted(nz) == [-1.0, 1.0]


def test_reca_touching_pair_is_zero():
    K = 5
    scn = one_lane([-100.0, -80.0], K=K)
    ev = reca_constraints(scn, 0, [np.full(K + 1, 10.0), np.full(K + 1, 17.0)])
    assert np.all(ev.value == 0.0)


def test_reca_single_vehicle_lane_is_empty():
    scn = one_lane([-100.0], K=5)
    assert reca_constraints(scn, 0, [np.zeros(6)]).value.size == 0


def test_sica_rows_and_signs():
    scn = two_lanes()
    scn = Scenario(scn.dt, scn.K, scn.vehicles, scn.lanes, scn.crossings, ((1, 0, 0),))
    T = [np.array([3.5, 5.0]), np.array([2.0, 4.0])]
    assert sica_constraints(scn, T).value[0] == pytest.approx(0.5)
    T[1][1] = 3.0
    assert sica_constraints(scn, T).value[0] == pytest.approx(-0.5)
    assert set(np.unique(sica_constraints(scn, T).jac)) <= {-1.0, 0.0, 1.0}


def test_sica_empty_order():
    scn = two_lanes()
    assert sica_constraints(scn, [np.zeros(2), np.zeros(2)]).value.size == 0


def test_reference_layout_has_twenty_ordering_rows():
    assert len(reference_scenario(0).order) == 20


# ---- objective ----

def _reference_w(K):
    w = np.zeros(n_w(K))
    w[vel_idx(K)] = V_REF
    w[: 4 * K].reshape(K, 4)[:, 2:] = reference_input(DEFAULT_PARAMS, V_REF)
    return w


def test_objective_zero_at_reference():
    scn = one_lane([-60.0], K=10)
    ev = objective(scn, 0, _reference_w(10))
    assert ev.value == 0.0 and np.all(ev.grad == 0.0)


def test_objective_single_terminal_deviation():
    K = 10
    scn = one_lane([-60.0], K=K)
    w = _reference_w(K)
    w[vel_idx(K)[-1]] += 1.0
    q, _ = stage_weights(DEFAULT_PARAMS, V_REF)
    qf = lqr_terminal_weight(DEFAULT_PARAMS, V_REF, scn.dt)
    assert objective(scn, 0, w).value == pytest.approx(qf + q, rel=1e-12)


def test_terminal_weight_matches_value_iteration():
    dt = 0.2
    q, R = stage_weights(DEFAULT_PARAMS, V_REF)
    st_ = rk4_step(DEFAULT_PARAMS, [0.0, V_REF], reference_input(DEFAULT_PARAMS, V_REF), dt)
    a, b = st_.jac_x[0, 1, 1], st_.jac_u[0, 1][None, :]
    P = 0.0
    for _ in range(500):
        P = q + a * P * a - a * P * b @ np.linalg.solve(R + b.T * P @ b, b.T * P * a)
        P = float(np.squeeze(P))
    assert lqr_terminal_weight(DEFAULT_PARAMS, V_REF, dt) == pytest.approx(P, rel=1e-10)


@given(seed=st.integers(0, 10_000))
def test_objective_gradient_matches_differences(seed):
    rng = np.random.default_rng(seed)
    scn = one_lane([-60.0], K=6)
    w = random_w(rng, 6)
    J = finite_difference_jacobian(lambda z: [objective(scn, 0, z).value], w, 1e-5)[0]
    assert rel_err(objective(scn, 0, w).grad, J) <= 1e-6


def test_gauss_newton_hessian_is_constant_psd(rng):
    scn = one_lane([-60.0], K=6)
    H1 = objective(scn, 0, random_w(rng, 6)).hess
    H2 = objective(scn, 0, random_w(rng, 6)).hess
    assert np.array_equal(H1, H2)
    assert np.min(np.linalg.eigvalsh(H1)) >= 0.0


# ---- guess and ordering ----

def test_horizon_too_short():
    with pytest.raises(ScenarioError, match="vehicle 0"):
        initial_guess(one_lane([-100.0], K=10))


def test_fcfs_nearer_vehicle_first():
    assert default_crossing_order(two_lanes(100.0, 80.0)) == ((1, 0, 0),)


def test_fcfs_tie_break_by_index():
    assert default_crossing_order(two_lanes(90.0, 90.0)) == ((0, 1, 0),)


def test_fcfs_chain_length():
    # four single-vehicle lanes through one zone
    v = tuple(Vehicle(l, -50.0 - 10 * l, V_REF, V_REF) for l in range(4))
    cr = tuple((CzCrossing(0, 0.0, 9.0),) for _ in range(4))
    scn = Scenario(0.2, 60, v, tuple((l,) for l in range(4)), cr, ())
    assert len(default_crossing_order(scn)) == 3


def test_split_w_layout():
    K = 3
    w = np.arange(n_w(K), dtype=float)
    xs, us = split_w(w, K)
    assert np.array_equal(xs[:, 0], w[pos_idx(K)])
    assert np.array_equal(us[1], [6.0, 7.0])
