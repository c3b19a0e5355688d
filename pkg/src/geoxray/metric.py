"""Domain, isotropic sound-speed fields and the Hamiltonian.

The metric is ``g_ij = delta_ij / c(x)**2`` so everything is expressed
through the scalar speed ``c``.  Fields are evaluated on batches of points
of shape ``(..., 3)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import interp
from .errors import ConfigError, NotOnBoundary

TOL_H = 1e-6
TOL_BD = 1e-9  # relative to the radius


@dataclass(frozen=True, eq=False)
class Domain:
    """Open ball ``|x - center| < radius``."""

    center: np.ndarray = field(default_factory=lambda: np.array([0.5, 0.5, 0.5]))
    radius: float = 0.4

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        if not self.radius > 0:
            raise ConfigError("domain radius must be positive")
        object.__setattr__(self, "radius", float(self.radius))

    @property
    def tol_bd(self):
        return TOL_BD * self.radius

    def distance(self, x):
        return np.linalg.norm(np.asarray(x, float) - self.center, axis=-1)

    def contains(self, x):
        return self.distance(x) < self.radius

    def depth(self, x):
        """Radial depth ``rho(x) = radius - |x - center|``."""
        return self.radius - self.distance(x)

    def normal(self, x):
        return (np.asarray(x, float) - self.center) / self.radius

    def on_boundary(self, x):
        return np.abs(self.distance(x) - self.radius) <= self.tol_bd


@dataclass(frozen=True, eq=False)
class PhasePoint:
    x: np.ndarray
    xi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, float).reshape(3))
        object.__setattr__(self, "xi", np.asarray(self.xi, float).reshape(3))

    @property
    def state(self):
        return np.concatenate([self.x, self.xi])

    @classmethod
    def from_state(cls, y):
        y = np.asarray(y, float)
        return cls(y[:3], y[3:6])


class SpeedField:
    """Common evaluation contract for analytic and gridded speeds."""

    def local(self, x, hessian=False):
        """Return ``c``, ``grad c`` and (optionally) the Hessian at ``x``."""
        raise NotImplementedError

    def speed(self, x):
        return self.local(x)[0]

    def gradient(self, x):
        return self.local(x)[1]

    def hessian(self, x):
        return self.local(x, hessian=True)[2]

    def to_ref(self):
        raise NotImplementedError


# --- analytic fields -------------------------------------------------------

ANALYTIC_SPEEDS = {}


def _register(name):
    def deco(cls):
        cls.kind = name
        ANALYTIC_SPEEDS[name] = cls
        return cls
    return deco


class AnalyticSpeed(SpeedField):
    kind = "analytic"
    defaults: dict = {}

    def __init__(self, **params):
        unknown = set(params) - set(self.defaults)
        if unknown:
            raise ConfigError(f"unknown parameters for {self.kind}: {sorted(unknown)}")
        p = {**self.defaults, **params}
        self.params = {k: (list(map(float, v)) if np.ndim(v) else float(v)) for k, v in p.items()}
        self._setup(**{k: np.asarray(v, float) if np.ndim(v) else float(v) for k, v in self.params.items()})

    def _setup(self, **p):
        for k, v in p.items():
            setattr(self, k, v)

    def local(self, x, hessian=False):
        x = np.asarray(x, float)
        lead = x.shape[:-1]
        c, g, H = self._eval(x.reshape(-1, 3), hessian)
        c, g = c.reshape(lead), g.reshape(lead + (3,))
        if hessian:
            return c, g, H.reshape(lead + (3, 3))
        return c, g

    def to_ref(self):
        return f"analytic:{self.kind}:{json.dumps(self.params, sort_keys=True)}"

    def __repr__(self):
        return f"{type(self).__name__}({self.params})"


@_register("constant")
class ConstantSpeed(AnalyticSpeed):
    defaults = {"value": 1.0}

    def _setup(self, value):
        if value <= 0:
            raise ConfigError("speed must be positive")
        self.value = value

    def _eval(self, x, hessian):
        n = len(x)
        H = np.zeros((n, 3, 3)) if hessian else None
        return np.full(n, self.value), np.zeros((n, 3)), H


@_register("linear")
class LinearSpeed(AnalyticSpeed):
    """``c = c0 + slope . (x - origin)``."""

    defaults = {"c0": 1.0, "slope": [0.1, 0.1, 0.1], "origin": [0.0, 0.0, 0.0]}

    def _eval(self, x, hessian):
        n = len(x)
        c = self.c0 + (x - self.origin) @ self.slope
        H = np.zeros((n, 3, 3)) if hessian else None
        return c, np.broadcast_to(self.slope, (n, 3)).copy(), H


def _sinc_terms(r):
    """``sin(r)/r`` and ``(r cos r - sin r)/r**3`` with small-r series."""
    small = r < 1e-3
    rs = np.where(small, 1.0, r)
    a = np.where(small, 1.0 - r**2 / 6.0, np.sin(rs) / rs)
    b = np.where(small, -1.0 / 3.0 + r**2 / 30.0, (rs * np.cos(rs) - np.sin(rs)) / rs**3)
    return a, b


@_register("radial_cosine")
class RadialCosineSpeed(AnalyticSpeed):
    """``c = base + amplitude * cos(|x - center|)``."""

    defaults = {"base": 1.0, "amplitude": 0.3, "center": [0.5, 0.5, 0.5]}

    def _eval(self, x, hessian):
        d = x - self.center
        r = np.linalg.norm(d, axis=1)
        a, b = _sinc_terms(r)
        c = self.base + self.amplitude * np.cos(r)
        g = -self.amplitude * a[:, None] * d
        H = None
        if hessian:
            # grad cos r = -a d,  hess cos r = -a I - b d d^T
            H = -self.amplitude * (a[:, None, None] * np.eye(3) + b[:, None, None] * d[:, :, None] * d[:, None, :])
        return c, g, H


@_register("sine_product")
class SineProductSpeed(AnalyticSpeed):
    """``c = base + amplitude * sin(k1 pi x) sin(k2 pi y) sin(k3 pi z)``."""

    defaults = {"base": 1.0, "amplitude": 0.2, "wavenumbers": [3.0, 1.0, 2.0]}

    def _eval(self, x, hessian):
        k = np.pi * self.wavenumbers
        s = np.sin(k * x)
        co = np.cos(k * x)
        prod = s.prod(axis=1)
        c = self.base + self.amplitude * prod
        g = np.empty_like(x)
        g[:, 0] = k[0] * co[:, 0] * s[:, 1] * s[:, 2]
        g[:, 1] = k[1] * s[:, 0] * co[:, 1] * s[:, 2]
        g[:, 2] = k[2] * s[:, 0] * s[:, 1] * co[:, 2]
        g *= self.amplitude
        H = None
        if hessian:
            H = np.empty((len(x), 3, 3))
            for a in range(3):
                for b in range(3):
                    term = np.ones(len(x))
                    for m in range(3):
                        if m == a == b:
                            term = term * (-(k[m] ** 2) * s[:, m])
                        elif m in (a, b):
                            term = term * (k[m] * co[:, m])
                        else:
                            term = term * s[:, m]
                    H[:, a, b] = self.amplitude * term
        return c, g, H


@_register("gaussian_bump")
class GaussianBumpSpeed(AnalyticSpeed):
    """``c = base + amplitude * exp(-|x - center|^2 / (2 width^2))``."""

    defaults = {"base": 10.0, "amplitude": 0.5, "center": [0.5, 0.5, 0.5], "width": 0.2}

    def _eval(self, x, hessian):
        d = x - self.center
        e = np.exp(-np.sum(d**2, axis=1) / (2 * self.width**2))
        c = self.base + self.amplitude * e
        g = -self.amplitude * e[:, None] * d / self.width**2
        H = None
        if hessian:
            outer = d[:, :, None] * d[:, None, :] / self.width**4
            H = self.amplitude * e[:, None, None] * (outer - np.eye(3) / self.width**2)
        return c, g, H


def analytic_speed(kind, **params):
    try:
        cls = ANALYTIC_SPEEDS[kind]
    except KeyError:
        raise ConfigError(f"unknown analytic speed id {kind!r}") from None
    return cls(**params)


# --- gridded fields --------------------------------------------------------

class GriddedSpeed(SpeedField):
    """Speed sampled on a regular lattice, trilinearly interpolated.

    Derivatives are central differences of the interpolant with step equal
    to the lattice spacing.  Shifting a point by exactly one cell keeps its
    interpolation weights, so these differences equal the trilinear
    interpolant of nodal central differences; both the gradient and the
    Hessian are precomputed that way.
    """

    kind = "gridded"

    def __init__(self, origin, spacing, values, source=None):
        self.origin = np.asarray(origin, float).reshape(3)
        self.spacing = np.broadcast_to(np.asarray(spacing, float), (3,)).copy()
        self.values = np.array(values, dtype=float)
        if self.values.ndim != 3 or min(self.values.shape) < 2:
            raise ConfigError("gridded speed needs at least 2 nodes per axis")
        if not np.all(self.values > 0):
            raise ConfigError("gridded speed values must be strictly positive")
        self.source = source
        self._channels = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def upper(self):
        return self.origin + self.spacing * (np.asarray(self.shape) - 1)

    def _build_channels(self):
        v = self.values
        grads = np.gradient(v, *self.spacing, edge_order=1)
        hess = np.empty(v.shape + (3, 3))
        for b in range(3):
            second = np.gradient(grads[b], *self.spacing, edge_order=1)
            for a in range(3):
                hess[..., a, b] = second[a]
        hess = 0.5 * (hess + np.swapaxes(hess, -1, -2))
        ch = np.empty(v.shape + (13,))
        ch[..., 0] = v
        ch[..., 1:4] = np.stack(grads, axis=-1)
        ch[..., 4:] = hess.reshape(v.shape + (9,))
        self._channels = ch

    def local(self, x, hessian=False):
        if self._channels is None:
            self._build_channels()
        x = np.asarray(x, float)
        lead = x.shape[:-1]
        ch = self._channels if hessian else self._channels[..., :4]
        out = interp.interpolate(ch, x.reshape(-1, 3), self.origin, self.spacing)
        c = out[:, 0].reshape(lead)
        g = out[:, 1:4].reshape(lead + (3,))
        if hessian:
            return c, g, out[:, 4:].reshape(lead + (3, 3))
        return c, g

    def with_values(self, values):
        return GriddedSpeed(self.origin, self.spacing, values)

    def node_coords(self):
        axes = [self.origin[a] + self.spacing[a] * np.arange(self.shape[a]) for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    @classmethod
    def sample(cls, field, origin, spacing, shape):
        """Gridded copy of ``field`` on the lattice described by the arguments."""
        tmp = cls(origin, spacing, np.ones(shape))
        return cls(origin, spacing, field.speed(tmp.node_coords()))

    def to_ref(self):
        return self.source or "gridded:<in-memory>"


# --- operations ------------------------------------------------------------

def speed_at(field, x):
    return field.speed(x)


def grad_speed_at(field, x):
    return field.gradient(x)


def hamiltonian(field, p):
    """``H = (c^2 |xi|^2 - 1) / 2``; accepts a PhasePoint or (..., 6) states."""
    if isinstance(p, PhasePoint):
        x, xi = p.x, p.xi
    else:
        y = np.asarray(p, float)
        x, xi = y[..., :3], y[..., 3:6]
    c = field.speed(x)
    return 0.5 * (c**2 * np.sum(xi**2, axis=-1) - 1.0)


def is_inflow(domain, field, p):
    if not np.all(domain.on_boundary(p.x)):
        raise NotOnBoundary(f"{p.x} is not on the boundary")
    c = field.speed(p.x)
    return bool(c**2 * np.dot(p.xi, domain.normal(p.x)) < 0)


def normalize_momentum(field, x, direction):
    """Scale ``direction`` so the state is on-shell (``c |xi| = 1``)."""
    direction = np.asarray(direction, float)
    c = field.speed(x)
    n = np.linalg.norm(direction, axis=-1)
    return direction / (n * c)[..., None]
