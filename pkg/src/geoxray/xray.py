"""Discrete geodesic X-ray transform and epsilon-neighbourhood back-projection.

The forward transform integrates the trilinear interpolant of a grid
function along RK4 samples with trapezoid weights ``|x'(s_i)| ds_i``.
Back-projection assigns to each node the mean of the data of all rays that
pass within ``eps`` of it.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import interp
from .errors import EmptyGeodesic
from .grids import GridFunction, prolong_Pstar


@dataclass(eq=False)
class XRayDataSet:
    """Line-integral measurements with the geodesics they were taken along."""

    initial: np.ndarray          # (m, 6)
    geodesics: list
    values: np.ndarray           # (m,)
    provenance: str = "simulated"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.initial = np.asarray(self.initial, float).reshape(-1, 6)
        self.values = np.asarray(self.values, float).reshape(-1)
        if not (len(self.initial) == len(self.geodesics) == len(self.values)):
            raise ValueError("dataset arrays have inconsistent lengths")
        if any(g is None or not g.exited for g in self.geodesics):
            raise ValueError("every record needs a geodesic that exits the domain")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("dataset values must be finite")

    def __len__(self):
        return len(self.values)

    def subset(self, index):
        index = np.asarray(index)
        return XRayDataSet(self.initial[index], [self.geodesics[i] for i in index],
                           self.values[index], self.provenance, dict(self.meta))

    def with_values(self, values):
        return XRayDataSet(self.initial, self.geodesics, values, self.provenance, dict(self.meta))


def trapezoid_weights(geo):
    """Quadrature weights ``|x'(s_i)| (s_{i+1} - s_{i-1}) / 2`` along one geodesic."""
    if geo.n_samples < 2:
        raise EmptyGeodesic("a geodesic needs at least two samples")
    ds = np.diff(geo.s)
    w = np.zeros(geo.n_samples)
    w[:-1] += 0.5 * ds
    w[1:] += 0.5 * ds
    return w * geo.velocity_norm()


def _stack(geodesics):
    xs, ws, rows = [], [], []
    for j, g in enumerate(geodesics):
        w = trapezoid_weights(g)
        xs.append(g.x)
        ws.append(w)
        rows.append(np.full(len(w), j))
    return np.concatenate(xs), np.concatenate(ws), np.concatenate(rows)


def forward_matrix(geodesics, grid):
    """Sparse forward operator, one row per geodesic, columns = flat lattice index.

    Interpolation corners outside the grid support contribute nothing.
    """
    n_rays = len(geodesics)
    if n_rays == 0:
        return sp.csr_matrix((0, grid.n_total))
    x, w, rows = _stack(geodesics)
    idx, cw, _ = interp.cell_weights(x, grid.origin, grid.h, grid.shape)
    vals = cw * w[:, None]
    keep = grid.support.ravel()[idx]
    r = np.broadcast_to(rows[:, None], idx.shape)[keep]
    A = sp.csr_matrix((vals[keep], (r, idx[keep])), shape=(n_rays, grid.n_total))
    A.sum_duplicates()
    return A


def forward(f, geo):
    """Line integral of grid function ``f`` along one geodesic.

    Coarse-grid functions are first extended to the fine grid.
    """
    if f.grid.level == "coarse":
        f = prolong_Pstar(f)
    w = trapezoid_weights(geo)
    grid = f.grid
    vals = np.where(grid.support, f.values, 0.0)
    fhat = interp.interpolate(vals, geo.x, grid.origin, grid.h)
    return float(np.dot(fhat, w))


def forward_many(f, geodesics):
    if f.grid.level == "coarse":
        f = prolong_Pstar(f)
    return forward_matrix(geodesics, f.grid) @ f.values.ravel()


class GeodesicIndex:
    """Which rays pass within ``eps`` of each node of a grid level.

    Stored as a sparse incidence matrix of shape (n_total, n_rays).  Each
    sample registers with the corners of its own cell, which are the only
    nodes that can lie within ``eps <= h/2``.
    """

    def __init__(self, geodesics, grid, eps=None):
        self.grid = grid
        self.eps = 0.5 * grid.h if eps is None else float(eps)
        self.n_rays = len(geodesics)
        if self.n_rays == 0:
            self.incidence = sp.csr_matrix((grid.n_total, 0))
        else:
            x = np.concatenate([g.x for g in geodesics])
            rays = np.concatenate([np.full(g.n_samples, j) for j, g in enumerate(geodesics)])
            idx, _, frac = interp.cell_weights(x, grid.origin, grid.h, grid.shape)
            d2 = np.sum((frac[:, None, :] - interp.CORNERS[None]) ** 2, axis=2) * grid.h**2
            hit = (d2 <= self.eps**2) & grid.support.ravel()[idx]
            nodes = idx[hit]
            r = np.broadcast_to(rays[:, None], idx.shape)[hit]
            inc = sp.csr_matrix((np.ones(len(nodes)), (nodes, r)), shape=(grid.n_total, self.n_rays))
            inc.sum_duplicates()
            inc.data[:] = 1.0
            self.incidence = inc
        self.counts = np.asarray(self.incidence.sum(axis=1)).ravel()

    def bucket(self, node_flat):
        row = self.incidence.getrow(node_flat)
        return np.sort(row.indices)

    def coverage(self, mask=None):
        """Fraction of nodes (``mask`` or the grid's inside nodes) with a non-empty bucket."""
        mask = self.grid.inside if mask is None else mask
        c = self.counts.reshape(self.grid.shape)[mask]
        return float(np.mean(c > 0)) if c.size else 0.0

    def average(self, values, rows=None):
        """Bucket means of ``values`` for the flat nodes ``rows`` (all if None)."""
        inc = self.incidence if rows is None else self.incidence[rows]
        counts = self.counts if rows is None else self.counts[rows]
        s = inc @ np.asarray(values, float)
        return np.divide(s, counts, out=np.zeros_like(s), where=counts > 0)


def backproject(data, idx, grid=None):
    """Back-projection: each node gets the mean value of the rays in its bucket.

    Nodes with empty buckets receive 0; ``idx.coverage()`` reports them.
    """
    grid = idx.grid if grid is None else grid
    if grid is not idx.grid and not (grid.same_lattice(idx.grid) and grid.level == idx.grid.level):
        from .errors import GridMismatch
        raise GridMismatch("index was built for a different grid")
    vals = data.values if isinstance(data, XRayDataSet) else np.asarray(data, float)
    return GridFunction(grid, idx.average(vals))
