from __future__ import annotations

import numpy as np
import pytest

from conftest import small_scenario
from intersection_pdip.kkt_core import (
    ContractViolation, RegularizationFailure, ResidualPartition, assemble_vehicle_block, eval_vehicle,
    initial_iterate, lagrangian_hessian, regularize_vehicle_hessian, residual_lane, residual_norm,
    residual_partition, residual_vehicle, vehicle_coupling_inputs,
)
from intersection_pdip.problem import Problem
from intersection_pdip.reference_oracle import (
    dense_residual, finite_difference_jacobian, random_interior_iterate,
)
from intersection_pdip.transcription import (
    CzCrossing, Scenario, Vehicle, n_path, pos_idx,
)

V_REF = 70.0 / 3.6


def lane_pair(K=5):
    v = (Vehicle(0, -60.0, V_REF, V_REF), Vehicle(0, -40.0, V_REF, V_REF))
    return Scenario(0.2, K, v, ((0, 1),), ((CzCrossing(0, 0.0, 9.0),),), ())


# ---- residuals ----

def test_centered_complementarity_vanishes():
    prob = Problem(small_scenario())
    it = initial_iterate(prob)
    it.tau = 0.25  # sqrt is exact
    for z, lay in zip(it.zv, prob.vehicles):
        z[lay.sl_mu] = z[lay.sl_s] = np.sqrt(it.tau)
    for lay in prob.vehicles:
        r = residual_vehicle(prob, it, lay.i)
        assert np.all(r[lay.sl_s] == 0.0)


def test_non_interior_rejected():
    prob = Problem(small_scenario())
    it = initial_iterate(prob)
    it.zv[0][prob.vehicles[0].sl_s][0] = 0.0
    it.zv[0][prob.vehicles[0].sl_s.start] = 0.0
    with pytest.raises(ContractViolation):
        residual_vehicle(prob, it, 0)


def test_lane_gap_absorbed_by_slack():
    prob = Problem(lane_pair(60), "exact")
    it = initial_iterate(prob)
    K = prob.K
    it.zv[0][pos_idx(K)] = 10.0
    it.zv[1][pos_idx(K)] = 20.0
    n = prob.lanes[0].n_rows
    it.zl[0] = np.concatenate([np.ones(n), np.full(n, 3.0)])
    it.tau = 3.0
    r = residual_lane(prob, it, 0)
    assert np.all(r[:n] == 0.0)
    assert np.all(r[n:] == 0.0)  # s * mu = tau


def test_residual_norm_nested_max():
    part = ResidualPartition([np.array([0.3, -0.1])], [np.array([-0.5])], np.array([0.1]))
    total, blocks = residual_norm(part)
    assert total == 0.5 and blocks["lanes"] == 0.5


def test_residual_norm_without_lanes():
    part = ResidualPartition([np.array([0.2])], [], np.array([-0.7]))
    assert residual_norm(part)[0] == 0.7


@pytest.mark.parametrize("mode", ["exact", "primal", "dual"])
def test_partition_matches_dense_oracle(mode, rng):
    prob = Problem(small_scenario(), mode)
    it = random_interior_iterate(prob, rng)
    r_prod, _ = dense_residual(prob, it)
    part = residual_partition(prob, it)
    flat = np.concatenate(part.rv + part.rl + [part.rc])
    # the oracle sums coupling terms in a different order, so agreement is to rounding
    scale = np.max(np.abs(r_prod))
    assert np.max(np.abs(flat - r_prod)) <= 1e-13 * scale
    assert residual_norm(part)[0] == pytest.approx(scale, rel=1e-13)


# ---- regularization ----

def test_pd_input_keeps_zero_shift():
    B = np.diag([2.0, 3.0])
    _, zeta, _ = regularize_vehicle_hessian(B, None, "exact_with_inertia")
    assert zeta == 0.0


def test_indefinite_toy_shift():
    _, zeta, f = regularize_vehicle_hessian(np.diag([1.0, -1.0]), None, "exact_with_inertia")
    assert zeta == 100.0  # 1 leaves a zero eigenvalue, the next schedule entry is 100
    assert f.inertia == (2, 0, 0)


def test_regularization_failure():
    with pytest.raises(RegularizationFailure):
        regularize_vehicle_hessian(-1e8 * np.eye(2), None, "exact_with_inertia")


def test_gauss_newton_symmetric_psd():
    prob = Problem(small_scenario())
    it = initial_iterate(prob)
    b = assemble_vehicle_block(prob, 0, it.zv[0], *vehicle_coupling_inputs(prob, it, 0), it.tau)
    assert np.array_equal(b.B, b.B.T)
    assert np.min(np.linalg.eigvalsh(b.B)) >= -1e-12


def test_gauss_newton_independent_of_duals(rng):
    prob = Problem(small_scenario())
    it1 = random_interior_iterate(prob, rng)
    it2 = it1.copy()
    lay = prob.vehicles[0]
    it2.zv[0][lay.sl_lam] = rng.normal(size=lay.n_g)
    it2.zv[0][lay.sl_mu] = rng.uniform(0.1, 3.0, lay.n_h)
    b1 = assemble_vehicle_block(prob, 0, it1.zv[0], *vehicle_coupling_inputs(prob, it1, 0), it1.tau)
    b2 = assemble_vehicle_block(prob, 0, it2.zv[0], *vehicle_coupling_inputs(prob, it2, 0), it2.tau)
    assert np.array_equal(b1.B, b2.B)


# ---- block structure ----

def test_block_dimension_closed_form():
    prob = Problem(small_scenario(K=100, dist=(80.0, 120.0)))
    lay = prob.vehicles[0]
    K, nT = 100, lay.n_T
    n_h = n_path(K) + nT  # path rows plus crossing-time horizon rows
    assert lay.n_z == (4 * K + 2 + nT) + (2 * (K + 1) + nT) + 2 * n_h
    assert lay.n_z == 2016


@pytest.mark.parametrize("hm", ["gauss_newton", "exact_with_inertia"])
def test_factor_solve_multiply_back(hm, rng):
    prob = Problem(small_scenario(), "primal")
    it = random_interior_iterate(prob, rng)
    for lay in prob.vehicles:
        b = assemble_vehicle_block(prob, lay.i, it.zv[lay.i], *vehicle_coupling_inputs(prob, it, lay.i), it.tau, hm)
        rhs = rng.normal(size=(lay.n_z, 3))
        x = b.factor.solve(rhs)
        M = b.dense()
        assert np.max(np.abs(M @ x - rhs)) <= 1e-10 * np.max(np.abs(rhs)) * max(1.0, np.max(np.abs(M)))
        assert np.allclose(b.matvec(x[:, 0]), M @ x[:, 0], rtol=0, atol=1e-12 * np.max(np.abs(M @ x[:, 0])))


@pytest.mark.parametrize("mode", ["exact", "dual"])
def test_lagrangian_hessian_matches_differences(mode, rng):
    scn = small_scenario(K=15, dist=(20.0, 40.0))
    prob = Problem(scn, mode)
    it = random_interior_iterate(prob, rng)
    lay = prob.vehicles[0]
    z = it.zv[0]
    lam, mu = z[lay.sl_lam], z[lay.sl_mu]
    cL, cC = vehicle_coupling_inputs(prob, it, 0)

    def grad_l(y):
        zz = z.copy()
        zz[lay.sl_y] = y
        ev = eval_vehicle(prob, 0, zz, cL, cC, it.tau)
        return ev.grad + ev.Jg.T @ lam + ev.Jh.T @ mu

    y0 = z[lay.sl_y].copy()
    H = lagrangian_hessian(prob, 0, y0, lam, mu)
    Hfd = finite_difference_jacobian(grad_l, y0, 1e-5)
    assert np.max(np.abs(H - Hfd)) <= 1e-6 * max(1.0, np.max(np.abs(Hfd)))
