import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geoxray.errors import EmptyGeodesic, GridMismatch
from geoxray.grids import Grid, GridFunction, Region, prolong_Pstar, restrict_P
from geoxray.layers import DEFAULT_DIRECTIONS, build_partition, generate_for_disks
from geoxray.metric import Domain, analytic_speed
from geoxray.synth import random_inflow_states
from geoxray.tracer import Geodesic, TracerConfig, trace, trace_many
from geoxray.xray import GeodesicIndex, backproject, forward, forward_many, forward_matrix

DOMAIN = Domain()
ONE = analytic_speed("constant", value=1.0)
GRID = Grid.for_domain(DOMAIN, 0.05)


def _rays(n, seed):
    states = random_inflow_states(DOMAIN, ONE, n, np.random.default_rng(seed))
    return [g for g in trace_many(DOMAIN, ONE, states) if g is not None]


def _chord():
    x0 = DOMAIN.center - np.array([DOMAIN.radius, 0, 0])
    return trace(DOMAIN, ONE, np.concatenate([x0, [1.0, 0, 0]]), TracerConfig(0.005))


def test_forward_of_zero_and_one():
    g = _chord()
    assert forward(GRID.zeros(), g) == 0.0
    assert forward(GRID.sample(lambda p: np.ones(len(p))), g) == pytest.approx(0.8, abs=1e-9)


def test_forward_of_coordinate_matches_dense_quadrature():
    g = _chord()
    got = forward(GRID.sample(lambda p: p[:, 0]), g)
    x = np.linspace(g.x[0, 0], g.x[-1, 0], 100001)
    ref = np.sum(0.5 * (x[1:] + x[:-1]) * np.diff(x))
    assert got == pytest.approx(ref, abs=1e-10)


def test_forward_of_coarse_function_uses_prolongation():
    f = GRID.sample(lambda p: p[:, 1] + 2 * p[:, 2])
    fc = restrict_P(f)
    geos = _rays(20, 0)
    np.testing.assert_allclose(forward_many(fc, geos), forward_matrix(geos, GRID) @ prolong_Pstar(fc).values.ravel())


def test_forward_needs_two_samples():
    g = Geodesic(np.zeros(1), np.full((1, 3), 0.5), np.ones((1, 3)), np.ones(1), True)
    with pytest.raises(EmptyGeodesic):
        forward(GRID.zeros(), g)


def test_forward_is_linear():
    rng = np.random.default_rng(1)
    geos = _rays(30, 1)
    u, v = (GridFunction(GRID, rng.normal(size=GRID.shape)) for _ in range(2))
    lhs = forward_many(2.5 * u + (-1.5) * v, geos)
    np.testing.assert_allclose(lhs, 2.5 * forward_many(u, geos) - 1.5 * forward_many(v, geos), atol=1e-12)


def _node_on_chord():
    cg = GRID.coarse()
    return int(np.ravel_multi_index(tuple(np.array(GRID.shape) // 2), GRID.shape)), cg


def test_backproject_single_and_two_records():
    node, cg = _node_on_chord()
    g = _chord()
    idx = GeodesicIndex([g], cg)
    assert backproject(np.array([2.5]), idx).values.ravel()[node] == 2.5
    idx2 = GeodesicIndex([g, _chord()], cg)
    assert backproject(np.array([1.0, 3.0]), idx2).values.ravel()[node] == 2.0


def test_bucket_matches_brute_force():
    cg = GRID.coarse()
    geos = _rays(40, 2)
    idx = GeodesicIndex(geos, cg)
    pts = cg.coords().reshape(-1, 3)
    sup = np.flatnonzero(cg.support.ravel())
    rng = np.random.default_rng(3)
    for node in rng.choice(sup, 60, replace=False):
        brute = [j for j, g in enumerate(geos)
                 if np.min(np.linalg.norm(g.x - pts[node], axis=1)) <= idx.eps]
        assert list(idx.bucket(node)) == brute


def test_backproject_rejects_other_grid():
    idx = GeodesicIndex([_chord()], GRID.coarse())
    with pytest.raises(GridMismatch):
        backproject(np.ones(1), idx, Grid.for_domain(DOMAIN, 0.1).coarse())


def test_backprojection_of_radial_data_is_symmetric():
    grid = Grid.for_domain(DOMAIN, 0.1)
    cg = grid.coarse()
    geos = _rays(50000, 4)

    def gauss(p):
        return np.exp(-np.sum((p - DOMAIN.center) ** 2, axis=-1) / 0.05)
    data = forward_many(grid.sample(gauss), geos)
    bp = backproject(data, GeodesicIndex(geos, cg)).values
    flipped = bp[::-1, ::-1, ::-1]
    m = cg.inside
    assert np.max(np.abs(bp - flipped)[m]) <= 0.05 * np.max(bp[m])


def test_coverage_of_layered_rays():
    grid = Grid.for_domain(DOMAIN, 0.08)
    part = build_partition(DOMAIN, grid, 5, DEFAULT_DIRECTIONS[:3])
    out = generate_for_disks(part.all_disks(), ONE, 300, TracerConfig(0.01), raise_empty=False)
    geos = [g for _, gs in out for g in gs]
    assert GeodesicIndex(geos, grid.coarse()).coverage() >= 0.99


# --- restriction and prolongation ----------------------------------------------

def test_restriction_examples():
    assert np.all(restrict_P(GRID.sample(lambda p: np.ones(len(p)))).values[GRID.coarse().support] == 1)
    f = GRID.sample(lambda p: p.sum(axis=1))
    fc = restrict_P(f)
    cs = GRID.coarse().support
    np.testing.assert_allclose(fc.values[cs], f.values[cs])
    ind = GRID.zeros()
    odd = np.argwhere(GRID.support & (GRID.parity == 1))[0]
    ind.values[tuple(odd)] = 1
    assert np.all(restrict_P(ind).values == 0)


def test_prolongation_examples():
    cg = GRID.coarse()
    ones = prolong_Pstar(GridFunction(cg, cg.support.astype(float)))
    np.testing.assert_allclose(ones.values[GRID.support], 1)
    lin = prolong_Pstar(restrict_P(GRID.sample(lambda p: 2 * p[:, 0] - p[:, 2])))
    region = Region(GRID, GRID.support)
    full = (region._neighbours() >= 0).all(axis=1)
    exact = (2 * GRID.coords()[..., 0] - GRID.coords()[..., 2]).ravel()[region.idx]
    np.testing.assert_allclose(region.gather(lin)[full], exact[full], atol=1e-13)
    node = np.array(GRID.shape) // 2
    ind = np.zeros(GRID.shape)
    ind[tuple(node)] = 1
    out = prolong_Pstar(GridFunction(cg, ind)).values
    assert out[tuple(node)] == 1
    for off in np.vstack([np.eye(3, dtype=int), -np.eye(3, dtype=int)]):
        assert out[tuple(node + off)] == pytest.approx(1 / 6)
    assert np.count_nonzero(out) == 7


def test_prolongation_needs_coarse_input():
    with pytest.raises(GridMismatch):
        prolong_Pstar(GRID.zeros())
    with pytest.raises(GridMismatch):
        restrict_P(GRID.coarse().zeros())


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_restrict_after_prolong_is_identity(seed):
    cg = GRID.coarse()
    v = np.where(cg.support, np.random.default_rng(seed).normal(size=cg.shape), 0.0)
    back = restrict_P(prolong_Pstar(GridFunction(cg, v)))
    np.testing.assert_array_equal(back.values, v)
