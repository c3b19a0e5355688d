"""Truncated, regularised Neumann series on two grids.

With ``R = P (A*A - delta Lap)^{-1} P*`` and ``K = Id - R Lambda I`` the
reconstruction is ``sum_{n=0}^{N} K^n R Lambda(data)``.  The series only
needs four things from a problem: ``backproject`` (data to coarse nodes),
``simulate`` (coarse nodes to data), ``approx_inverse`` (``R``) and the
coarse-node count, so the same driver serves the X-ray and the traveltime
inversions.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DivergenceDetected, ZeroReference
from .grids import Region
from .normal import NormalOperator, node_weights, regularizer
from .xray import GeodesicIndex, XRayDataSet, forward_matrix

log = logging.getLogger(__name__)

DEFAULT_TERMS = 4
DELTA_XRAY = 0.2


@dataclass
class NeumannResult:
    values: np.ndarray        # final partial sum on the coarse nodes
    partial_sums: list        # partial sums after 1, 2, ..., N+1 terms
    increments: list          # norms of the added terms

    @property
    def n_terms(self):
        return len(self.partial_sums)


def neumann_series(problem, data, n_terms=DEFAULT_TERMS, check_divergence=True):
    """Partial sums ``S_n = sum_{k<=n} K^k b`` for n = 0..n_terms.

    ``K g = g - R Lambda I g``.  Raises DivergenceDetected when an increment
    grows by more than 2x on two consecutive terms.
    """
    if n_terms < 0:
        raise ValueError("n_terms must be >= 0")
    term = problem.approx_inverse(problem.backproject(data))
    total = term.copy()
    partials = [total.copy()]
    norms = [float(np.linalg.norm(term))]
    growth = 0
    for _ in range(n_terms):
        term = term - problem.approx_inverse(problem.backproject(problem.simulate(term)))
        total = total + term
        partials.append(total.copy())
        norms.append(float(np.linalg.norm(term)))
        if norms[-2] > 0 and norms[-1] > 2.0 * norms[-2]:
            growth += 1
            if check_divergence and growth >= 2:
                raise DivergenceDetected(f"Neumann increments grow: {norms}")
        else:
            growth = 0
    return NeumannResult(total, partials, norms)


class XRayProblem:
    """Two-grid X-ray inversion restricted to a region of the fine grid.

    ``simulate`` is the fine-grid integral of the prolonged coarse function,
    ``backproject`` the epsilon-bucket mean onto the region's coarse nodes.
    """

    def __init__(self, geodesics, region, delta=DELTA_XRAY, eps=None, bc="dirichlet", A_full=None,
                 incidence=None):
        self.region = region
        self.geodesics = geodesics
        grid = region.grid
        if A_full is None:
            A_full = forward_matrix(geodesics, grid)
        self.A_full = A_full
        A = A_full[:, region.idx]
        self.normal = NormalOperator(A, node_weights(A), regularizer(region, bc), delta)
        if incidence is None:
            incidence = GeodesicIndex(geodesics, grid.coarse(), eps).incidence
        self.incidence = incidence[region.coarse_idx]
        self.counts = np.asarray(self.incidence.sum(axis=1)).ravel()
        self.P = region.restrict
        self.Pstar = region.prolongation

    @property
    def n_coarse(self):
        return self.region.n_coarse

    def backproject(self, data):
        s = self.incidence @ np.asarray(data, float)
        return np.divide(s, self.counts, out=np.zeros_like(s), where=self.counts > 0)

    def simulate(self, g):
        return self.normal.forward(self.Pstar @ g)

    def approx_inverse(self, r):
        return self.P(self.normal.solve(self.Pstar @ r))


def reconstruct(data, grid, region_mask=None, n_terms=DEFAULT_TERMS, delta=DELTA_XRAY, eps=None, bc="dirichlet"):
    """Neumann-series reconstruction of ``data`` on one region of ``grid``.

    Returns the coarse GridFunction and the NeumannResult (partial sums as
    coarse vectors ordered like ``region.coarse_idx``).
    """
    values = data.values if isinstance(data, XRayDataSet) else np.asarray(data, float)
    region = Region(grid, grid.support if region_mask is None else region_mask)
    problem = XRayProblem(data.geodesics, region, delta, eps, bc)
    res = neumann_series(problem, values, n_terms)
    return region.scatter(res.values, level="coarse"), res


def relative_error(f_rec, f_true):
    """``|f_rec - f_true| / |f_true|`` in the discrete L2 norm over inside nodes.

    Accepts GridFunctions on the same grid or plain arrays.
    """
    if hasattr(f_rec, "grid"):
        if f_rec.grid is not f_true.grid and f_rec.grid.level != f_true.grid.level:
            raise ValueError("relative_error needs functions on the same grid")
        a, b = f_rec.inside_values(), f_true.inside_values()
    else:
        a, b = np.asarray(f_rec, float), np.asarray(f_true, float)
    ref = np.linalg.norm(b)
    if ref == 0:
        raise ZeroReference("reference field has zero norm")
    return float(np.linalg.norm(a - b) / ref)
