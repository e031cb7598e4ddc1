from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from intersection_pdip.reference_oracle import finite_difference_jacobian
from intersection_pdip.vehicle_model import (
    DEFAULT_PARAMS, DomainError, VehicleParams, continuous_dynamics, position_at, reference_input, rk4_step,
    rollout,
)

UNIT = VehicleParams(m=1.0, c_e=1.0, c_d=0.0, c_r=0.0)
V_REF = 70.0 / 3.6


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1.0))


# ---- dynamics ----

def test_dynamics_force_only():
    assert np.allclose(continuous_dynamics(UNIT, [0.0, 1.0], [2.0, 0.0]), [1.0, 2.0])


def test_dynamics_pure_braking():
    assert np.allclose(continuous_dynamics(UNIT, [5.0, 3.0], [0.0, 3.0]), [3.0, -3.0])


def test_reference_input_holds_speed():
    f = continuous_dynamics(DEFAULT_PARAMS, [0.0, V_REF], reference_input(DEFAULT_PARAMS, V_REF))
    assert f[0] == pytest.approx(V_REF)
    assert abs(f[1]) < 1e-12


@pytest.mark.parametrize("field,value", [("m", 0.0), ("c_e", -1.0), ("c_d", -0.1), ("delta", 1.0)])
def test_params_validation(field, value):
    with pytest.raises(ValueError):
        DEFAULT_PARAMS.with_(**{field: value})


# ---- rk4 ----

def test_zero_step_is_identity():
    st_ = rk4_step(DEFAULT_PARAMS, [3.0, 10.0], [100.0, 50.0], 0.0)
    assert np.array_equal(st_.x_next[0], [3.0, 10.0])
    assert np.array_equal(st_.jac_x[0], np.eye(2))
    assert np.array_equal(st_.jac_u[0], np.zeros((2, 2)))


def test_rk4_exact_for_constant_acceleration():
    st_ = rk4_step(UNIT, [0.0, 1.0], [2.0, 0.0], 0.5)
    assert np.allclose(st_.x_next[0], [0.75, 2.0], atol=1e-15, rtol=0)


@given(h=st.floats(0.0, 1.0), p=st.floats(-100, 100), v=st.floats(0, 40), a=st.floats(-5, 5))
def test_rk4_closed_form_without_drag(h, p, v, a):
    st_ = rk4_step(UNIT, [p, v], [a, 0.0], h)
    expect = [p + v * h + 0.5 * a * h * h, v + a * h]
    assert np.allclose(st_.x_next[0], expect, rtol=1e-13, atol=1e-12)


@given(p=st.floats(-150, 0), v=st.floats(0, 40), e=st.floats(-400, 400), fb=st.floats(0, 10000),
       h=st.floats(0.01, 0.4))
def test_rk4_sensitivities_match_central_differences(p, v, e, fb, h):
    def step(z):
        return rk4_step(DEFAULT_PARAMS, z[:2], z[2:4], z[4]).x_next[0]

    z = np.array([p, v, e, fb, h])
    J = finite_difference_jacobian(step, z, 1e-5)
    s = rk4_step(DEFAULT_PARAMS, [p, v], [e, fb], h)
    assert rel_err(s.jac_x[0], J[:, :2]) <= 1e-6
    assert rel_err(s.jac_u[0], J[:, 2:4]) <= 1e-6
    assert rel_err(s.d_h[0], J[:, 4]) <= 1e-6


def test_rk4_batched_matches_single(rng):
    xs = rng.uniform([-100, 0], [0, 30], (6, 2))
    us = rng.uniform([-100, 0], [300, 500], (6, 2))
    batch = rk4_step(DEFAULT_PARAMS, xs, us, 0.2)
    for n in range(6):
        one = rk4_step(DEFAULT_PARAMS, xs[n], us[n], 0.2)
        assert np.array_equal(batch.x_next[n], one.x_next[0])
        assert np.array_equal(batch.jac_u[n], one.jac_u[0])


def test_negative_step_rejected():
    with pytest.raises(ValueError):
        rk4_step(DEFAULT_PARAMS, [0.0, 1.0], [0.0, 0.0], -0.1)


# ---- position_at ----

def _constant_speed(K=10, dt=0.5, v=10.0):
    xs = np.column_stack([v * dt * np.arange(K + 1), np.full(K + 1, v)])
    return xs, np.zeros((K, 2)), dt


def test_position_constant_speed():
    xs, us, dt = _constant_speed()
    pe = position_at(UNIT, xs, us, 3.5, dt)
    assert pe.p == pytest.approx(35.0, rel=1e-14)
    assert pe.dp_dt == pytest.approx(10.0, rel=1e-14)


def test_position_on_grid_point():
    xs, us, dt = _constant_speed()
    pe = position_at(UNIT, xs, us, 2.0, dt)
    assert pe.k == 4 and pe.p == xs[4, 0]


@pytest.mark.parametrize("t", [-1e-9, 5.0 + 1e-9])
def test_position_outside_horizon(t):
    xs, us, dt = _constant_speed()
    with pytest.raises(DomainError):
        position_at(UNIT, xs, us, t, dt)


def test_position_matches_fine_integration():
    K, dt = 20, 0.2
    us = np.tile([0.0, 3000.0], (K, 1))
    xs = rollout(DEFAULT_PARAMS, [-50.0, 19.0], us, dt)
    for t in (0.37, 1.91, 3.33):
        k = int(t // dt)
        h = t - k * dt
        fine = xs[k].copy()
        for _ in range(100):
            fine = rk4_step(DEFAULT_PARAMS, fine, us[k], h / 100).x_next[0]
        assert position_at(DEFAULT_PARAMS, xs, us, t, dt).p == pytest.approx(fine[0], rel=1e-8)


def test_position_continuous_across_nodes(rng):
    K, dt = 15, 0.2
    us = rng.uniform([0, 0], [300, 2000], (K, 2))
    xs = rollout(DEFAULT_PARAMS, [-80.0, 18.0], us, dt)
    for k in range(1, K):
        left = rk4_step(DEFAULT_PARAMS, xs[k - 1], us[k - 1], dt).x_next[0, 0]
        right = position_at(DEFAULT_PARAMS, xs, us, k * dt, dt).p
        assert abs(left - right) <= 1e-12 * max(1.0, abs(right))


@given(t=st.floats(0.01, 2.99))
def test_position_gradients_match_differences(t):
    K, dt = 15, 0.2
    us = np.tile([150.0, 400.0], (K, 1))
    xs = rollout(DEFAULT_PARAMS, [-60.0, 17.0], us, dt)
    pe = position_at(DEFAULT_PARAMS, xs, us, t, dt)
    k = pe.k
    h = t - k * dt
    if min(h, dt - h) < 2e-5:
        return  # the owning interval would change inside the stencil

    def f(z):
        return [rk4_step(DEFAULT_PARAMS, z[:2], z[2:4], z[4]).x_next[0, 0]]

    J = finite_difference_jacobian(f, np.r_[xs[k], us[k], h], 1e-5)[0]
    assert rel_err(pe.dp_dx, J[:2]) <= 1e-6
    assert rel_err(pe.dp_du, J[2:4]) <= 1e-6
    assert rel_err(pe.dp_dt, J[4]) <= 1e-6
