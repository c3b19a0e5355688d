"""Two-level node sets on a regular lattice.

The fine grid ``Z_f`` is every lattice node near the ball; the coarse grid
``Z`` keeps the nodes with even index parity ``(i + j + k) % 2 == 0``, the
checkerboard sub-lattice.  Every odd node has its six face neighbours in
``Z``.
"""
from __future__ import annotations

import math
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import GridMismatch

FACE_OFFSETS = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]])


class Grid:
    """Lattice nodes with a support mask and an ``inside`` (in-domain) mask.

    ``support`` contains every corner of a cell that meets the ball, so the
    trilinear interpolant is defined along every geodesic; ``inside`` is the
    subset lying in the closed ball and is what error norms use.
    """

    def __init__(self, origin, h, shape, support, inside, level="fine"):
        self.origin = np.asarray(origin, float).reshape(3)
        self.h = float(h)
        self.shape = tuple(int(s) for s in shape)
        self.support = np.asarray(support, bool)
        self.inside = np.asarray(inside, bool) & self.support
        self.level = level

    @classmethod
    def for_domain(cls, domain, h, margin=2):
        """Fine grid around ``domain`` with the center on a lattice node."""
        n = math.ceil(domain.radius / h) + margin
        origin = domain.center - n * h
        shape = (2 * n + 1,) * 3
        grid = cls(origin, h, shape, np.ones(shape, bool), np.ones(shape, bool))
        dist = np.linalg.norm(grid.coords() - domain.center, axis=-1)
        support = dist < domain.radius + math.sqrt(3) * h
        inside = dist <= domain.radius
        return cls(origin, h, shape, support, inside)

    def coords(self):
        axes = [self.origin[a] + self.h * np.arange(self.shape[a]) for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    @cached_property
    def parity(self):
        i, j, k = np.indices(self.shape)
        return (i + j + k) % 2

    @property
    def n_total(self):
        return int(np.prod(self.shape))

    def coarse(self):
        if self.level == "coarse":
            return self
        even = self.parity == 0
        g = self.__dict__.get("_coarse")
        if g is None:
            g = Grid(self.origin, self.h, self.shape, self.support & even, self.inside & even, "coarse")
            g.__dict__["parity"] = self.parity
            g.parent = self
            self.__dict__["_coarse"] = g
        return g

    def fine(self):
        if self.level == "fine":
            return self
        parent = getattr(self, "parent", None)
        if parent is None:
            raise GridMismatch("this coarse grid has no paired fine grid")
        return parent

    def same_lattice(self, other):
        return (self.shape == other.shape and np.allclose(self.origin, other.origin)
                and math.isclose(self.h, other.h))

    def zeros(self):
        return GridFunction(self, np.zeros(self.shape))

    def sample(self, func):
        """GridFunction of ``func(points)`` on the support nodes."""
        vals = np.zeros(self.shape)
        pts = self.coords()[self.support]
        vals[self.support] = func(pts)
        return GridFunction(self, vals)


class GridFunction:
    """Scalar values on a grid's support nodes (zero elsewhere)."""

    def __init__(self, grid, values):
        self.grid = grid
        v = np.array(values, dtype=float).reshape(grid.shape)
        v[~grid.support] = 0.0
        self.values = v

    def inside_values(self):
        return self.values[self.grid.inside]

    def norm(self):
        return float(np.linalg.norm(self.inside_values()))

    def __add__(self, other):
        return GridFunction(self.grid, self.values + other.values)

    def __sub__(self, other):
        return GridFunction(self.grid, self.values - other.values)

    def __mul__(self, a):
        return GridFunction(self.grid, self.values * a)

    __rmul__ = __mul__

    def copy(self):
        return GridFunction(self.grid, self.values.copy())


class Region:
    """Subset of fine-grid nodes with its coarse part and local operators.

    Vectors on the region are ordered by flat lattice index.  The coarse
    part is the even-parity subset, in the same order.
    """

    def __init__(self, grid, mask):
        if grid.level != "fine":
            raise GridMismatch("regions are defined on the fine grid")
        self.grid = grid
        self.mask = np.asarray(mask, bool) & grid.support
        self.idx = np.flatnonzero(self.mask)
        self.is_coarse = grid.parity.ravel()[self.idx] == 0
        self.coarse_idx = self.idx[self.is_coarse]
        self.coarse_pos = np.flatnonzero(self.is_coarse)

    @property
    def n(self):
        return len(self.idx)

    @property
    def n_coarse(self):
        return len(self.coarse_idx)

    def _lookup(self):
        pos = np.full(self.grid.n_total, -1, dtype=np.int64)
        pos[self.idx] = np.arange(self.n)
        return pos

    def _neighbours(self):
        """(n, 6) region positions of face neighbours, -1 where absent."""
        shape = np.asarray(self.grid.shape)
        ijk = np.stack(np.unravel_index(self.idx, self.grid.shape), axis=1)
        pos = self._lookup()
        nb = np.full((self.n, 6), -1, dtype=np.int64)
        for m, off in enumerate(FACE_OFFSETS):
            q = ijk + off
            ok = np.all((q >= 0) & (q < shape), axis=1)
            flat = np.ravel_multi_index(q[ok].T, self.grid.shape)
            nb[ok, m] = pos[flat]
        return nb

    @cached_property
    def prolongation(self):
        """Sparse P* (n x n_coarse): copy coarse nodes, average coarse neighbours."""
        cpos = np.full(self.n, -1, dtype=np.int64)
        cpos[self.coarse_pos] = np.arange(self.n_coarse)
        rows = [self.coarse_pos]
        cols = [np.arange(self.n_coarse)]
        vals = [np.ones(self.n_coarse)]
        nb = self._neighbours()
        odd = np.flatnonzero(~self.is_coarse)
        nbo = nb[odd]
        present = nbo >= 0
        count = present.sum(axis=1)
        r, m = np.nonzero(present)
        rows.append(odd[r])
        cols.append(cpos[nbo[r, m]])
        vals.append(1.0 / count[r])
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(self.n, self.n_coarse))

    def restrict(self, u):
        return np.asarray(u)[..., self.coarse_pos]

    def prolong(self, uc):
        return self.prolongation @ uc

    def laplacian(self, bc="dirichlet"):
        """7-point Laplacian restricted to the region.

        ``bc="dirichlet"`` treats nodes outside the region as zero;
        ``bc="neumann"`` drops missing neighbours from the stencil so
        constants are in the kernel.
        """
        nb = self._neighbours()
        present = nb >= 0
        r, m = np.nonzero(present)
        h2 = self.grid.h**2
        off = sp.csr_matrix((np.full(len(r), 1.0 / h2), (r, nb[r, m])), shape=(self.n, self.n))
        if bc == "dirichlet":
            diag = np.full(self.n, -6.0 / h2)
        elif bc == "neumann":
            diag = -present.sum(axis=1) / h2
        else:
            raise ValueError(f"unknown boundary condition {bc!r}")
        return (off + sp.diags(diag)).tocsr()

    def gather(self, gf):
        return gf.values.ravel()[self.idx]

    def scatter(self, u, level="fine"):
        g = self.grid if level == "fine" else self.grid.coarse()
        vals = np.zeros(self.grid.n_total)
        if level == "fine":
            vals[self.idx] = u
        else:
            vals[self.coarse_idx] = u
        return GridFunction(g, vals)


def _whole(grid):
    reg = grid.__dict__.get("_whole_region")
    if reg is None:
        reg = Region(grid, grid.support)
        grid.__dict__["_whole_region"] = reg
    return reg


def restrict_P(f_fine):
    """Sample a fine-grid function at the coarse nodes."""
    if f_fine.grid.level != "fine":
        raise GridMismatch("restriction expects a fine-grid function")
    coarse = f_fine.grid.coarse()
    return GridFunction(coarse, np.where(coarse.support, f_fine.values, 0.0))


def prolong_Pstar(f_coarse, fine=None):
    """Extend a coarse function to ``fine``; odd nodes average coarse neighbours."""
    if fine is None:
        fine = f_coarse.grid.fine()
    if f_coarse.grid.level != "coarse" or fine.level != "fine" or not fine.same_lattice(f_coarse.grid):
        raise GridMismatch("prolongation needs a coarse function and its paired fine grid")
    if not np.array_equal(f_coarse.grid.support, fine.support & (fine.parity == 0)):
        raise GridMismatch("coarse support is not the even part of the fine support")
    reg = _whole(fine)
    u = reg.prolong(f_coarse.values.ravel()[reg.coarse_idx])
    return reg.scatter(u)
