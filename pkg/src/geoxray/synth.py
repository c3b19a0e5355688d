"""Test functions, synthetic data and noise."""
from __future__ import annotations

import numpy as np

from .errors import ConfigError, NoValidRays
from .layers import generate_for_disks
from .metric import normalize_momentum
from .tracer import TracerConfig, trace_many
from .xray import XRayDataSet, trapezoid_weights

ORACLE_REFINE = 4


def _f1(x, y, z):
    return 0.01 + np.sin(2 * np.pi * (x + y + z) / 10)


def _f2(x, y, z):
    return 0.01 + np.sin(2 * np.pi * (x + y) / 10) + np.cos(2 * np.pi * z / 20)


def _f3(x, y, z):
    return x + y**2 + z**2 / 2


def _f4(x, y, z):
    return 1 + 6 * x + 4 * y + 9 * z + np.sin(2 * np.pi * (x + z)) + np.cos(2 * np.pi * y)


def _f5(x, y, z):
    return x + np.exp(y + z / 2)


TEST_FUNCTIONS = {"f1": _f1, "f2": _f2, "f3": _f3, "f4": _f4, "f5": _f5}


def reference_function(name):
    """Vectorised ``f(points)`` for one of ``f1`` .. ``f5``; points have shape (..., 3)."""
    try:
        f = TEST_FUNCTIONS[name]
    except KeyError:
        raise ConfigError(f"unknown test function {name!r}") from None
    return lambda p: f(p[..., 0], p[..., 1], p[..., 2])


def add_noise(values, level, rng):
    """``values + eps`` with uniform ``eps`` rescaled so ``|eps| / |values| == level`` exactly."""
    values = np.asarray(values, float)
    if level < 0:
        raise ConfigError("noise level must be non-negative")
    if level == 0:
        return values.copy()
    eps = rng.uniform(-1.0, 1.0, size=values.shape)
    eps *= level * np.linalg.norm(values) / np.linalg.norm(eps)
    return values + eps


def random_inflow_states(domain, field, n, rng):
    """``n`` on-shell entry states: uniform boundary points, cosine-weighted inward directions."""
    if n < 1:
        raise ConfigError("the ray count must be positive")
    nrm = rng.normal(size=(n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    x = domain.center + domain.radius * nrm
    # cosine-weighted hemisphere around the inward normal
    u, phi = rng.uniform(size=n), rng.uniform(0, 2 * np.pi, size=n)
    a = np.where(np.abs(nrm[:, :1]) < 0.9, [[1.0, 0, 0]], [[0, 1.0, 0]])
    e1 = np.cross(nrm, a)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(nrm, e1)
    sin_t = np.sqrt(u)
    d = (-np.sqrt(1 - u)[:, None] * nrm + (sin_t * np.cos(phi))[:, None] * e1
         + (sin_t * np.sin(phi))[:, None] * e2)
    return np.hstack([x, normalize_momentum(field, x, d)])


def ray_bundle(disks, field, rays_per_disk, step):
    """Entry states and geodesics for ``disks`` under ``field``.

    Disks whose candidates all miss their slab are skipped.
    """
    if rays_per_disk < 1:
        raise ConfigError("the ray budget must be positive")
    out = generate_for_disks(list(disks), field, rays_per_disk, TracerConfig(step), raise_empty=False)
    states = [s for s, _ in out if len(s)]
    if not states:
        raise NoValidRays("no disk retained any ray")
    geos = [g for _, gs in out for g in gs]
    return np.vstack(states), geos


def line_integrals(domain, field, states, functions, step, batch=20000):
    """Integrals of analytic ``functions`` along rays traced from ``states`` at ``step``.

    Returns an array of shape (n_states, n_functions).
    """
    states = np.asarray(states, float).reshape(-1, 6)
    out = np.zeros((len(states), len(functions)))
    for a in range(0, len(states), batch):
        geos = trace_many(domain, field, states[a:a + batch], TracerConfig(step), on_trapped="raise")
        for j, g in enumerate(geos):
            w = trapezoid_weights(g)
            out[a + j] = [np.dot(f(g.x), w) for f in functions]
    return out


def xray_dataset(partition, field, functions, rays_per_disk, step, noise=0.0, seed=0, refine=ORACLE_REFINE):
    """Simulated X-ray data of analytic functions.

    The reconstruction geodesics are traced at ``step``; the data are line
    integrals of the exact functions along the same rays retraced at
    ``step / refine``.  ``functions`` maps names to callables on (n, 3)
    points; the first one fills ``values`` and all of them are kept in
    ``meta["values"]`` column by column, each with its own noise draw.
    """
    states, geos = ray_bundle(partition.all_disks(), field, rays_per_disk, step)
    clean = line_integrals(partition.domain, field, states, list(functions.values()), step / refine)
    rng = np.random.default_rng(seed)
    values = np.stack([add_noise(clean[:, j], noise, rng) for j in range(clean.shape[1])], axis=1)
    meta = {"values": values, "names": list(functions), "noise": noise, "seed": seed}
    return XRayDataSet(states, geos, values[:, 0], "simulated", meta)
