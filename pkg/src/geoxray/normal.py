"""Fine-grid normal operator ``A*A`` and the regularised solve ``(A*A - delta Lap) u = r``.

``A*`` is the transpose of the discrete forward operator normalised by the
total weight each node receives, ``A* w = D^{-1} A^T w`` with
``D = diag(sum_rows |A|)``.  That makes ``A*`` an average of ray values (a
constant ray value back-projects to itself) and the exact adjoint of ``A``
for the ``D``-weighted node inner product.
"""
from __future__ import annotations

import logging

import numpy as np
import scipy.sparse as sp

from .errors import NoConvergence

log = logging.getLogger(__name__)

TOL_KRY = 1e-8
MAX_KRY = 500


def node_weights(A, row_scale=None):
    """``D_x = sum_r |A_rx| * row_scale_r`` (row_scale defaults to 1)."""
    absA = abs(A)
    if row_scale is not None:
        absA = sp.diags(row_scale) @ absA
    return np.asarray(absA.sum(axis=0)).ravel()


class NormalOperator:
    """Matrix-free ``A*A - delta * Lap`` on the nodes of one region."""

    def __init__(self, A, weights, laplacian, delta):
        if delta < 0:
            raise ValueError("delta must be non-negative")
        self.A = sp.csr_matrix(A)
        self.At = self.A.T.tocsr()
        self.weights = np.asarray(weights, float)
        self.inv_weights = np.divide(1.0, self.weights, out=np.zeros_like(self.weights), where=self.weights > 0)
        self.laplacian = sp.csr_matrix(laplacian)
        self.delta = float(delta)

    @property
    def n(self):
        return self.A.shape[1]

    def forward(self, u):
        return self.A @ u

    def adjoint(self, w):
        return self.inv_weights * (self.At @ w)

    def apply_normal(self, u):
        return self.adjoint(self.forward(u))

    def apply_laplacian(self, u):
        return self.laplacian @ u

    def apply_system(self, u):
        return self.apply_normal(u) - self.delta * (self.laplacian @ u)

    def inner(self, u, v):
        """Node inner product in which ``adjoint`` is the transpose of ``forward``."""
        return float(np.sum(self.weights * u * v))

    def solve(self, rhs, tol=TOL_KRY, maxiter=MAX_KRY):
        u, _ = gmres(self.apply_system, rhs, tol=tol, maxiter=maxiter)
        return u


def apply_normal(op, u):
    return op.apply_normal(u)


def apply_laplacian(region, u, bc="dirichlet"):
    return region.laplacian(bc) @ u


def regularizer(region, bc="dirichlet"):
    """Laplacian in grid units, ``h^2 Lap``: the 7-point stencil without ``1/h^2``.

    ``delta`` multiplies this matrix, so its value does not depend on the
    physical size of the domain.
    """
    return region.laplacian(bc) * region.grid.h**2


def solve_regularized(op, rhs, tol=TOL_KRY, maxiter=MAX_KRY):
    return op.solve(rhs, tol, maxiter)


def gmres(apply, b, tol=TOL_KRY, maxiter=MAX_KRY):
    """Unrestarted GMRES from a zero initial guess.

    Returns the solution and the residual-norm history (non-increasing by
    construction).  Raises NoConvergence when ``|r| > tol |b|`` after
    ``maxiter`` iterations.
    """
    b = np.asarray(b, float)
    n = len(b)
    beta = np.linalg.norm(b)
    history = [beta]
    if beta == 0.0 or n == 0:
        return np.zeros(n), history
    m = min(maxiter, n)
    V = np.zeros((m + 1, n))
    Hs = np.zeros((m + 1, m))
    cs = np.zeros(m)
    sn = np.zeros(m)
    g = np.zeros(m + 1)
    g[0] = beta
    V[0] = b / beta
    k = 0
    for k in range(m):
        w = apply(V[k])
        for i in range(k + 1):
            Hs[i, k] = np.dot(V[i], w)
            w = w - Hs[i, k] * V[i]
        for i in range(k + 1):  # second pass keeps the basis orthogonal
            corr = np.dot(V[i], w)
            Hs[i, k] += corr
            w = w - corr * V[i]
        Hs[k + 1, k] = np.linalg.norm(w)
        breakdown = Hs[k + 1, k] <= 1e-14 * beta
        if not breakdown:
            V[k + 1] = w / Hs[k + 1, k]
        for i in range(k):
            t = cs[i] * Hs[i, k] + sn[i] * Hs[i + 1, k]
            Hs[i + 1, k] = -sn[i] * Hs[i, k] + cs[i] * Hs[i + 1, k]
            Hs[i, k] = t
        rho = np.hypot(Hs[k, k], Hs[k + 1, k])
        cs[k], sn[k] = Hs[k, k] / rho, Hs[k + 1, k] / rho
        Hs[k, k] = rho
        Hs[k + 1, k] = 0.0
        g[k + 1] = -sn[k] * g[k]
        g[k] = cs[k] * g[k]
        history.append(abs(g[k + 1]))
        if abs(g[k + 1]) <= tol * beta or breakdown:
            break
    kk = k + 1
    y = np.linalg.solve(np.triu(Hs[:kk, :kk]), g[:kk])
    x = V[:kk].T @ y
    if history[-1] > tol * beta:
        raise NoConvergence(f"GMRES stopped at relative residual {history[-1] / beta:.3e} after {kk} iterations",
                            residual=history[-1] / beta, iterations=kk)
    return x, history
