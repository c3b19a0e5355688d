import numpy as np
import pytest
import scipy.sparse as sp

from geoxray.errors import NoConvergence
from geoxray.grids import Grid, Region
from geoxray.metric import Domain, analytic_speed
from geoxray.normal import NormalOperator, apply_laplacian, gmres, node_weights, regularizer, solve_regularized
from geoxray.synth import random_inflow_states
from geoxray.tracer import TracerConfig, trace, trace_many
from geoxray.xray import forward_matrix

DOMAIN = Domain()
ONE = analytic_speed("constant", value=1.0)
GRID = Grid.for_domain(DOMAIN, 0.05)
MID = GRID.shape[0] // 2


def _block(n):
    m = np.zeros(GRID.shape, bool)
    lo, hi = MID - n // 2, MID + n - n // 2
    m[lo:hi, lo:hi, lo:hi] = True
    return Region(GRID, m)


def _operator(region, n_rays=150, delta=0.2, seed=0):
    states = random_inflow_states(DOMAIN, ONE, n_rays, np.random.default_rng(seed))
    geos = [g for g in trace_many(DOMAIN, ONE, states) if g is not None]
    A = forward_matrix(geos, GRID)[:, region.idx]
    return NormalOperator(A, node_weights(A), regularizer(region), delta)


def test_normal_of_zero():
    op = _operator(_block(7))
    assert np.all(op.apply_normal(np.zeros(op.n)) == 0)


def test_constant_on_one_chord_backprojects_to_chord_length():
    region = Region(GRID, GRID.support)
    x0 = DOMAIN.center - np.array([DOMAIN.radius, 0, 0])
    g = trace(DOMAIN, ONE, np.concatenate([x0, [1.0, 0, 0]]), TracerConfig(0.005))
    A = forward_matrix([g], GRID)[:, region.idx]
    op = NormalOperator(A, node_weights(A), regularizer(region), 0.0)
    out = op.apply_normal(np.ones(region.n))
    touched = op.weights > 0
    np.testing.assert_allclose(out[touched], 0.8, atol=1e-9)
    assert np.all(out[~touched] == 0)


def test_weighted_adjoint_and_symmetry():
    op = _operator(_block(7))
    rng = np.random.default_rng(1)
    for _ in range(5):
        u, v, w = rng.normal(size=op.n), rng.normal(size=op.n), rng.normal(size=op.A.shape[0])
        lhs = float(np.dot(op.forward(u), w))
        assert lhs == pytest.approx(op.inner(u, op.adjoint(w)), rel=1e-10)
        assert op.inner(op.apply_normal(u), v) == pytest.approx(op.inner(u, op.apply_normal(v)), rel=1e-10)


def test_laplacian_isolated_node_neumann():
    m = np.zeros(GRID.shape, bool)
    m[MID, MID, MID] = True
    region = Region(GRID, m)
    assert apply_laplacian(region, np.array([3.0]), bc="neumann")[0] == 0.0


def test_laplacian_of_quadratic():
    region = _block(7)
    x = GRID.coords()[..., 0].ravel()[region.idx]
    out = apply_laplacian(region, x**2)
    interior = (region._neighbours() >= 0).all(axis=1)
    np.testing.assert_allclose(out[interior], 2.0, atol=1e-8)


def test_laplacian_of_indicator():
    region = _block(5)
    h = GRID.h
    u = np.zeros(region.n)
    centre = np.flatnonzero(region.idx == np.ravel_multi_index((MID, MID, MID), GRID.shape))[0]
    u[centre] = 1.0
    out = apply_laplacian(region, u)
    assert out[centre] == pytest.approx(-6 / h**2)
    nb = region._neighbours()[centre]
    np.testing.assert_allclose(out[nb], 1 / h**2)
    assert np.count_nonzero(out) == 7


def test_regularizer_is_grid_unit_laplacian():
    region = _block(5)
    diff = regularizer(region) - region.laplacian() * GRID.h**2
    assert abs(diff).max() == 0


def test_solve_zero_rhs():
    op = _operator(_block(7))
    assert np.all(solve_regularized(op, np.zeros(op.n)) == 0)


def test_manufactured_solution():
    op = _operator(_block(7))
    u0 = np.random.default_rng(2).normal(size=op.n)
    np.testing.assert_allclose(op.solve(op.apply_system(u0)), u0, rtol=0, atol=1e-6 * np.linalg.norm(u0))


def test_no_rays_matches_dense_solve():
    region = _block(5)
    A = sp.csr_matrix((0, region.n))
    op = NormalOperator(A, node_weights(A), region.laplacian(), 0.3)
    rhs = np.random.default_rng(3).normal(size=region.n)
    dense = np.linalg.solve(-0.3 * region.laplacian().toarray(), rhs)
    np.testing.assert_allclose(op.solve(rhs, tol=1e-12), dense, rtol=1e-8, atol=1e-12)


def test_gmres_residuals_are_monotone():
    op = _operator(_block(7))
    _, hist = gmres(op.apply_system, np.random.default_rng(4).normal(size=op.n))
    assert all(b <= a * (1 + 1e-12) for a, b in zip(hist, hist[1:]))
    assert hist[-1] <= 1e-8 * hist[0]


def test_gmres_reports_non_convergence():
    op = _operator(_block(7))
    with pytest.raises(NoConvergence):
        gmres(op.apply_system, np.random.default_rng(5).normal(size=op.n), maxiter=2)


def test_negative_delta_rejected():
    region = _block(3)
    with pytest.raises(ValueError):
        NormalOperator(sp.csr_matrix((0, region.n)), np.zeros(region.n), region.laplacian(), -1.0)
