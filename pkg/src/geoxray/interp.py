"""Trilinear interpolation on regular 3D lattices.

Arrays are indexed ``values[i, j, k]`` with ``i`` along x.  Weight routines
return flat C-order node indices so the same stencils can be used both for
evaluating fields and for assembling sparse operators.
"""
from __future__ import annotations

import numpy as np

from .errors import OutOfBounds

CORNERS = np.array([[a, b, c] for a in (0, 1) for b in (0, 1) for c in (0, 1)])


def _locate(points, origin, spacing, shape, tol=1e-9):
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    u = (pts - origin) / spacing
    upper = np.asarray(shape) - 1
    if np.any(u < -tol) or np.any(u > upper + tol) or not np.all(np.isfinite(u)):
        bad = np.where(np.any((u < -tol) | (u > upper + tol) | ~np.isfinite(u), axis=1))[0][0]
        raise OutOfBounds(f"point {pts[bad]} lies outside the gridded extent")
    base = np.clip(np.floor(u).astype(np.int64), 0, upper - 1)
    frac = np.clip(u - base, 0.0, 1.0)
    return base, frac


def cell_weights(points, origin, spacing, shape):
    """Corner indices and trilinear weights for each query point.

    Returns
    -------
    idx : (n, 8) int array of flat node indices
    w : (n, 8) float array, rows sum to one
    frac : (n, 3) local coordinates in the containing cell
    """
    shape = tuple(int(s) for s in shape)
    base, frac = _locate(points, np.asarray(origin, float), np.asarray(spacing, float), shape)
    corner = base[:, None, :] + CORNERS[None, :, :]
    idx = (corner[..., 0] * shape[1] + corner[..., 1]) * shape[2] + corner[..., 2]
    f = frac[:, None, :]
    w = np.prod(np.where(CORNERS[None] == 1, f, 1.0 - f), axis=2)
    return idx, w, frac


def cell_gradient_weights(frac, spacing):
    """Derivatives of the trilinear weights with respect to x, y, z.

    Returns an (n, 8, 3) array; contracting it with the corner values gives
    the exact gradient of the interpolant inside the cell.
    """
    spacing = np.broadcast_to(np.asarray(spacing, float), (3,))
    f = frac[:, None, :]
    lin = np.where(CORNERS[None] == 1, f, 1.0 - f)
    dlin = np.where(CORNERS[None] == 1, 1.0, -1.0) / spacing
    g = np.empty(lin.shape)
    g[..., 0] = dlin[..., 0] * lin[..., 1] * lin[..., 2]
    g[..., 1] = lin[..., 0] * dlin[..., 1] * lin[..., 2]
    g[..., 2] = lin[..., 0] * lin[..., 1] * dlin[..., 2]
    return g


def interpolate(values, points, origin, spacing):
    """Evaluate the trilinear interpolant of ``values`` at ``points``.

    ``values`` may carry trailing channels, shape ``(nx, ny, nz, ...)``.
    """
    values = np.asarray(values, dtype=float)
    shape = values.shape[:3]
    pts = np.asarray(points, dtype=float)
    lead = pts.shape[:-1]
    idx, w, _ = cell_weights(pts, origin, spacing, shape)
    flat = values.reshape((-1,) + values.shape[3:])
    gathered = flat[idx]
    out = np.einsum("nk,nk...->n...", w, gathered)
    return out.reshape(lead + values.shape[3:])
