import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geoxray import interp
from geoxray.errors import ConfigError, NotOnBoundary, OutOfBounds
from geoxray.metric import (Domain, GriddedSpeed, PhasePoint, analytic_speed, grad_speed_at, hamiltonian,
                            is_inflow, normalize_momentum, speed_at)

DOMAIN = Domain()


def test_constant_lattice_interpolates_to_constant():
    c = GriddedSpeed([0, 0, 0], 0.5, np.full((3, 3, 3), 2.0))
    assert speed_at(c, np.array([0.3, 0.7, 0.2])) == pytest.approx(2.0, abs=1e-14)
    np.testing.assert_allclose(grad_speed_at(c, np.array([0.5, 0.5, 0.5])), 0, atol=1e-14)


def test_radial_cosine_center_value():
    assert speed_at(analytic_speed("radial_cosine"), DOMAIN.center) == pytest.approx(1.3, abs=1e-12)


def test_corner_indicator_at_cell_center():
    v = np.zeros((2, 2, 2))
    v[0, 0, 0] = 1.0
    out = interp.interpolate(v, np.array([[0.5, 0.5, 0.5]]), np.zeros(3), 1.0)
    assert out[0] == pytest.approx(0.125, abs=1e-15)


def test_linear_speed_gradient():
    lin = analytic_speed("linear", c0=1.0, slope=[0.1, 0.1, 0.1])
    np.testing.assert_allclose(grad_speed_at(lin, np.array([0.3, 0.4, 0.6])), [0.1, 0.1, 0.1], atol=1e-14)


def test_gridded_linear_gradient_is_exact():
    proto = GriddedSpeed([0, 0, 0], 0.1, np.ones((11, 11, 11)))
    g = proto.with_values(1 + 0.1 * proto.node_coords()[..., 0])
    np.testing.assert_allclose(grad_speed_at(g, np.array([0.43, 0.51, 0.37])), [0.1, 0, 0], atol=1e-12)


@pytest.mark.parametrize("kind, xi, expected", [
    ("constant", [1, 0, 0], 0.0),
    ("constant", [0.6, 0.8, 0], 0.0),
    ("radial_cosine", [1, 0, 0], 0.345),
])
def test_hamiltonian_values(kind, xi, expected):
    p = PhasePoint(DOMAIN.center.copy(), np.array(xi, float))
    assert hamiltonian(analytic_speed(kind), p) == pytest.approx(expected, abs=1e-12)


def test_normalized_momentum_is_on_shell():
    f = analytic_speed("radial_cosine")
    x = np.array([[0.5, 0.5, 0.1], [0.3, 0.6, 0.5]])
    xi = normalize_momentum(f, x, np.array([[0.2, -1, 3], [1, 1, 1]]))
    np.testing.assert_allclose(hamiltonian(f, np.hstack([x, xi])), 0, atol=1e-15)


def test_is_inflow():
    one = analytic_speed("constant", value=1.0)
    x = DOMAIN.center + np.array([0, 0, DOMAIN.radius])
    nu = DOMAIN.normal(x)
    assert is_inflow(DOMAIN, one, PhasePoint(x, -nu))
    assert not is_inflow(DOMAIN, one, PhasePoint(x, nu))
    assert not is_inflow(DOMAIN, one, PhasePoint(x, np.array([1.0, 0, 0])))
    with pytest.raises(NotOnBoundary):
        is_inflow(DOMAIN, one, PhasePoint(DOMAIN.center, np.array([1.0, 0, 0])))


def test_gridded_outside_lattice_raises():
    g = GriddedSpeed([0, 0, 0], 0.5, np.ones((3, 3, 3)))
    with pytest.raises(OutOfBounds):
        speed_at(g, np.array([1.2, 0.5, 0.5]))


def test_gridded_rejects_nonpositive_values():
    with pytest.raises(ConfigError):
        GriddedSpeed([0, 0, 0], 0.5, np.zeros((3, 3, 3)))


def test_gridded_gradient_second_order():
    f = analytic_speed("sine_product")
    x = np.array([0.5, 0.5, 0.5])
    errs = []
    for n in (8, 16, 32):
        h = 0.8 / n
        g = GriddedSpeed.sample(f, x - n / 2 * h, h, (n + 1,) * 3)
        errs.append(np.linalg.norm(grad_speed_at(g, x) - grad_speed_at(f, x)))
    assert errs[0] / errs[1] > 3.5 and errs[1] / errs[2] > 3.5


@pytest.mark.parametrize("kind", ["radial_cosine", "sine_product", "gaussian_bump", "linear"])
def test_analytic_gradient_and_hessian_match_differences(kind):
    f = analytic_speed(kind)
    x = np.array([0.41, 0.57, 0.36])
    e = 1e-6
    _, g, H = f.local(x[None], hessian=True)
    for a in range(3):
        d = np.eye(3)[a] * e
        fd = (f.speed(x + d) - f.speed(x - d)) / (2 * e)
        assert g[0, a] == pytest.approx(fd, abs=1e-8)
        fdg = (f.gradient(x + d) - f.gradient(x - d)) / (2 * e)
        np.testing.assert_allclose(H[0, a], fdg, atol=1e-7)


coef = st.lists(st.floats(-2, 2), min_size=8, max_size=8)
unit = st.floats(0, 1)


@settings(max_examples=40, deadline=None)
@given(coef, unit, unit, unit)
def test_trilinear_polynomials_reproduced(a, px, py, pz):
    def poly(x, y, z):
        return (a[0] + a[1] * x + a[2] * y + a[3] * z + a[4] * x * y + a[5] * y * z + a[6] * x * z
                + a[7] * x * y * z)
    axes = np.linspace(0, 1, 4)
    X, Y, Z = np.meshgrid(axes, axes, axes, indexing="ij")
    vals = poly(X, Y, Z)
    got = interp.interpolate(vals, np.array([[px, py, pz]]), np.zeros(3), 1 / 3)[0]
    assert got == pytest.approx(poly(px, py, pz), abs=1e-12)
