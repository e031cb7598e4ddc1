from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import small_scenario
from intersection_pdip.hier_linalg import StepDirection, SymFactor, search_direction
from intersection_pdip.kkt_core import SingularBlock, assemble_vehicle_block, vehicle_coupling_inputs
from intersection_pdip.problem import Problem
from intersection_pdip.reference_oracle import (
    assemble_dense, block_index, dense_solve, direction_error, random_interior_iterate,
)

MODES = ("exact", "primal", "dual")


# ---- symmetric factor ----

def test_symfactor_inertia_of_diagonal():
    fac = SymFactor(np.diag([1.0, -1.0, 2.0]))
    assert fac.inertia == (2, 1, 0)


def test_symfactor_singular_raises():
    with pytest.raises(SingularBlock):
        SymFactor(np.array([[1.0, 1.0], [1.0, 1.0]]))


def test_symfactor_empty():
    fac = SymFactor(np.zeros((0, 0)))
    assert fac.solve(np.zeros(0)).shape == (0,)


@given(st.integers(0, 10_000), st.integers(1, 12))
def test_symfactor_solves_indefinite(seed, n):
    rng = np.random.default_rng(seed)
    B = rng.normal(size=(n, n))
    M = B + B.T + np.diag(rng.choice([-5.0, 5.0], n))
    b = rng.normal(size=(n, 3))
    x = SymFactor(M).solve(b)
    assert np.allclose(M @ x, b, atol=1e-8 * max(1.0, np.abs(b).max()) * np.linalg.cond(M))
    assert np.allclose(SymFactor(M).solve(b[:, 0]), x[:, 0])


# ---- hierarchical vs dense ----

@pytest.mark.parametrize("mode", MODES)
@pytest.mark.parametrize("hm", ("gauss_newton", "exact_with_inertia"))
def test_direction_matches_dense(mode, hm):
    prob = Problem(small_scenario(seed=5, n_lanes=2, per_lane=2, K=20), mode)
    rng = np.random.default_rng(7)
    for _ in range(3):
        it = random_interior_iterate(prob, rng)
        assert direction_error(prob, it, hm) <= 1e-8


@given(st.integers(0, 500), st.sampled_from(MODES))
def test_direction_matches_dense_random_layouts(seed, mode):
    rng = np.random.default_rng(seed)
    n_lanes = int(rng.choice([1, 2, 4]))
    per_lane = int(rng.integers(1, 3)) if n_lanes < 4 else 1
    scn = small_scenario(seed=seed, n_lanes=n_lanes, per_lane=per_lane, K=int(rng.integers(20, 31)))
    prob = Problem(scn, mode)
    assert direction_error(prob, random_interior_iterate(prob, rng)) <= 1e-8


def test_single_vehicle_lanes_have_no_lane_coupling():
    prob = Problem(small_scenario(seed=2, n_lanes=4, per_lane=1, K=20))
    assert all(lay.a == 0 for lay in prob.vehicles)
    it = random_interior_iterate(prob, np.random.default_rng(0))
    assert direction_error(prob, it) <= 1e-8


def test_slice_dimensions_follow_layout():
    for mode in MODES:
        prob = Problem(small_scenario(seed=4, K=20), mode)
        it = random_interior_iterate(prob, np.random.default_rng(1))
        blocks = [assemble_vehicle_block(prob, lay.i, it.zv[lay.i], *vehicle_coupling_inputs(prob, it, lay.i),
                                         it.tau, "gauss_newton") for lay in prob.vehicles]
        d = search_direction(prob, it, blocks)
        for lay, dz, cv in zip(prob.vehicles, d.dzv, d.dmu_Cv):
            assert dz.shape == (lay.n_z,)
            assert cv.shape == (lay.n_T,)
        for l, dz in enumerate(d.dzl):
            assert dz.shape == it.zl[l].shape
        assert d.dzc.shape == it.zc.shape
        idx = block_index(prob)
        assert d.flat().size == idx["n"]


def test_direction_solves_dense_system():
    prob = Problem(small_scenario(seed=6, K=20))
    it = random_interior_iterate(prob, np.random.default_rng(3))
    kkt = assemble_dense(prob, it)
    dz = dense_solve(kkt)
    res = kkt.M @ dz + kkt.r
    assert np.max(np.abs(res)) <= 1e-9 * max(1.0, np.max(np.abs(kkt.r)))


def test_step_direction_scaled():
    d = StepDirection([np.ones(2)], [np.ones(3)], np.ones(1), [], [], [])
    h = d.scaled(0.5)
    assert np.all(h.flat() == 0.5)
    assert d.flat().size == 6
