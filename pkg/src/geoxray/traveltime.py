"""Traveltime tomography from boundary scattering data.

A measurement is an entry state ``X0``, the exit state and the exit time
``t`` under the unknown speed.  For a current guess ``c_n`` each measurement
gives a 6-vector mismatch ``d = X(t) - X_n(t)``, and to first order

    d = int_0^t J_n(t) J_n(s)^{-1} dgV_n(lambda)(X_n(s)) ds,

with ``lambda = c - c_n`` and ``J_n`` the flow Jacobian of ``c_n``.  Stacking
the 6 rows of every measurement gives a sparse matrix ``G`` acting on node
values of ``lambda``; the speed update is recovered from ``G lambda = d`` with
the same regularised Neumann series as the X-ray problem, disk by disk and
shell by shell.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import interp
from .errors import ConfigError, NoValidRays, SingularJacobian
from .grids import GridFunction, Region, prolong_Pstar
from .layers import DiskMerger, disk_members, ray_keys
from .metric import GriddedSpeed
from .neumann import DEFAULT_TERMS, neumann_series
from .normal import NormalOperator, regularizer
from .tracer import TracerConfig, trace_for_time, trace_many

log = logging.getLogger(__name__)

DELTA_TRAVELTIME = 0.2
SWEEPS = 3
COND_CAP = 1e12
CLAMP_FRACTION = 1e-3


@dataclass(eq=False)
class Measurement:
    """Scattering data: entry states, exit states and exit times, one row per ray."""

    initial: np.ndarray       # (m, 6)
    exit_state: np.ndarray    # (m, 6)
    exit_time: np.ndarray     # (m,)

    def __post_init__(self):
        self.initial = np.asarray(self.initial, float).reshape(-1, 6)
        self.exit_state = np.asarray(self.exit_state, float).reshape(-1, 6)
        self.exit_time = np.asarray(self.exit_time, float).reshape(-1)
        if not (len(self.initial) == len(self.exit_state) == len(self.exit_time)):
            raise ValueError("measurement arrays have inconsistent lengths")
        if not (np.all(np.isfinite(self.initial)) and np.all(np.isfinite(self.exit_state))
                and np.all(np.isfinite(self.exit_time))):
            raise ValueError("measurements must be finite")

    def __len__(self):
        return len(self.exit_time)

    def subset(self, index):
        index = np.asarray(index)
        return Measurement(self.initial[index], self.exit_state[index], self.exit_time[index])

    def as_array(self):
        """``(m, 13)``: entry state, exit state, exit time."""
        return np.hstack([self.initial, self.exit_state, self.exit_time[:, None]])


@dataclass
class MismatchVector:
    d: np.ndarray             # (m, 6): position then momentum mismatch

    @property
    def norm(self):
        return float(np.linalg.norm(self.d))


@dataclass(eq=False)
class MetricIterate:
    speed: GriddedSpeed
    n: int = 0


@dataclass(frozen=True)
class TraveltimeConfig:
    """Knobs of the traveltime loop.

    ``step=None`` picks ``0.01 / max(c0)``, i.e. about 0.01 length units per
    RK4 step, since the flow parameter is travel time.
    """

    step: float | None = None
    sweeps: int = SWEEPS
    n_terms: int = DEFAULT_TERMS
    delta: float = DELTA_TRAVELTIME
    bc: str = "neumann"
    layers: tuple | None = None       # shells to process, default all
    clamp_fraction: float = CLAMP_FRACTION

    def __post_init__(self):
        if self.sweeps < 1:
            raise ConfigError("sweeps must be >= 1")
        if self.delta < 0:
            raise ConfigError("delta must be non-negative")
        if self.step is not None and not self.step > 0:
            raise ConfigError("step must be positive")

    def step_for(self, speed):
        if self.step is not None:
            return self.step
        return 0.01 / float(np.max(speed.values))


def simulate_measurements(domain, field, states, step, refine=4):
    """Exit states and times of ``states`` under ``field`` at ``step / refine``.

    Rays that graze or get trapped are dropped; the retained row indices
    are returned alongside.
    """
    geos = trace_many(domain, field, states, TracerConfig(step / refine))
    keep = np.array([i for i, g in enumerate(geos) if g is not None], dtype=np.int64)
    if len(keep) == 0:
        raise NoValidRays("no measurement ray exits the domain")
    meas = Measurement(np.asarray(states, float)[keep], np.array([geos[i].end_state for i in keep]),
                       np.array([geos[i].exit_time for i in keep]))
    return meas, keep


# --- the linearised operator ------------------------------------------------

def _stencil(x, grid):
    """Nodes and weights of the value and the gradient of a lattice function at ``x``.

    The gradient matches GriddedSpeed: the trilinear interpolant of nodal
    central differences, so each corner ``k`` contributes its neighbours
    ``k +/- e_a`` with weight ``+/- w_k / 2h`` (one-sided ``+/- w_k / h`` on
    the lattice faces, like ``np.gradient``).  Returns ``idx`` (n, 56) with
    the 8 corners first, the trilinear weights ``w`` (n, 8) and the
    gradient weights ``gw`` (n, 56, 3).
    """
    idx8, w, _ = interp.cell_weights(x, grid.origin, grid.h, grid.shape)
    ijk = np.stack(np.unravel_index(idx8, grid.shape), axis=-1)
    upper = np.asarray(grid.shape) - 1
    cols = [idx8]
    gw = np.zeros((len(x), 56, 3))
    for a in range(3):
        edge = (ijk[..., a] == 0) | (ijk[..., a] == upper[a])
        span = np.where(edge, 1.0, 2.0) * grid.h
        for j, sgn in enumerate((1, -1)):
            q = ijk.copy()
            q[..., a] = np.clip(q[..., a] + sgn, 0, upper[a])
            cols.append(np.ravel_multi_index(np.moveaxis(q, -1, 0), grid.shape))
            blk = 8 * (1 + 2 * a + j)
            gw[:, blk:blk + 8, a] = sgn * w / span
    return np.concatenate(cols, axis=1), w, gw


def stencil_nodes(points, grid):
    """Flat indices of every node the linearised operator can touch at ``points``."""
    idx, _, _ = _stencil(np.asarray(points, float).reshape(-1, 3), grid)
    return np.unique(idx)


def _dgv_weights(field, x, xi, grid):
    """Per-sample ``(idx, B)`` with ``dgV(lambda) = B @ lambda[idx]``, B of shape (n, 6, 56)."""
    c, gc = field.local(x)
    idx, w, gw = _stencil(x, grid)
    p2 = np.sum(xi**2, axis=1)
    B = np.zeros((len(x), 6, idx.shape[1]))
    B[:, :3, :8] = 2.0 * c[:, None, None] * xi[:, :, None] * w[:, None, :]
    B[:, 3:, :8] = -p2[:, None, None] * gc[:, :, None] * w[:, None, :]
    B[:, 3:, :] -= (p2 * c)[:, None, None] * np.swapaxes(gw, 1, 2)
    return idx, B


def dgV(field, lam, p):
    """Derivative of the Hamiltonian vector field in the direction of a speed change ``lam``.

    ``(2 c lam xi, -(lam grad c + c grad lam) |xi|^2)`` with ``lam`` from the
    trilinear interpolant and ``grad lam`` from interpolated central
    differences, the same discretisation GriddedSpeed uses for ``grad c``.
    """
    if lam.grid.level == "coarse":
        lam = prolong_Pstar(lam)
    grid = lam.grid
    x = np.asarray(p.x, float).reshape(1, 3)
    xi = np.asarray(p.xi, float).reshape(1, 3)
    idx, B = _dgv_weights(field, x, xi, grid)
    vals = np.where(grid.support, lam.values, 0.0).ravel()
    return B[0] @ vals[idx[0]]


def compute_mismatch(meas, gn, step):
    """Trace every entry state under ``gn`` for its measured time.

    Returns ``(MismatchVector, geodesics)``; the geodesics carry the flow
    Jacobian ``J`` at each sample.
    """
    speed = gn.speed if isinstance(gn, MetricIterate) else gn
    geos = trace_for_time(speed, meas.initial, meas.exit_time, step, jacobian=True)
    end = np.array([g.end_state for g in geos]).reshape(-1, 6)
    return MismatchVector(meas.exit_state - end), geos


def _quad_weights(s):
    ds = np.diff(s)
    w = np.zeros(len(s))
    w[:-1] += 0.5 * ds
    w[1:] += 0.5 * ds
    return w


def linearized_rows(geodesics, field, grid, cond_cap=COND_CAP, chunk=256):
    """Sparse ``G`` of shape ``(6 m, n_total)``: rows ``6i..6i+5`` are ``I_i``.

    The integral runs over the flow parameter with trapezoid weights and
    ``J(t - s, X(s)) = J(t) J(s)^{-1}``.  Rays with a sample whose Jacobian
    has condition number above ``cond_cap`` get zero rows and are flagged in
    the returned ``valid`` mask.  Rays are assembled ``chunk`` at a time to
    bound the size of the dense per-sample blocks.
    """
    m = len(geodesics)
    if m == 0:
        return sp.csr_matrix((0, grid.n_total)), np.zeros(0, bool)
    blocks, valid = [], []
    for start in range(0, m, chunk):
        G, ok = _rows_block(geodesics[start:start + chunk], field, grid, cond_cap)
        blocks.append(G)
        valid.append(ok)
    valid = np.concatenate(valid)
    if not np.all(valid):
        log.warning("dropped %d of %d rays with ill-conditioned flow Jacobians", int((~valid).sum()), m)
    return sp.vstack(blocks, format="csr"), valid


def _rows_block(geodesics, field, grid, cond_cap):
    m = len(geodesics)
    lens = np.array([g.n_samples for g in geodesics])
    ray = np.repeat(np.arange(m), lens)
    x = np.concatenate([g.x for g in geodesics])
    xi = np.concatenate([g.xi for g in geodesics])
    J = np.concatenate([g.J for g in geodesics])
    Jt = np.stack([g.J[-1] for g in geodesics])
    q = np.concatenate([_quad_weights(g.s) for g in geodesics])
    cond = np.linalg.cond(J)
    bad = np.zeros(m, bool)
    np.logical_or.at(bad, ray, ~(cond <= cond_cap))
    ok = ~bad[ray]
    Jsafe = np.where(ok[:, None, None], J, np.eye(6))
    # (J(t) J(s)^{-1})^T = J(s)^{-T} J(t)^T
    prop = np.swapaxes(np.linalg.solve(np.swapaxes(Jsafe, 1, 2), np.swapaxes(Jt[ray], 1, 2)), 1, 2)
    idx, B = _dgv_weights(field, x, xi, grid)
    C = (q * ok)[:, None, None] * (prop @ B)
    rows = np.broadcast_to(6 * ray[:, None, None] + np.arange(6)[None, :, None], C.shape)
    cols = np.broadcast_to(idx[:, None, :], C.shape)
    keep = grid.support.ravel()[cols]
    G = sp.csr_matrix((C[keep], (rows[keep], cols[keep])), shape=(6 * m, grid.n_total))
    G.sum_duplicates()
    G.eliminate_zeros()
    return G, ~bad


def linearized_row(geodesic, field, grid, cond_cap=COND_CAP):
    """The ``6 x n_total`` block of one ray; raises SingularJacobian instead of dropping it."""
    G, valid = linearized_rows([geodesic], field, grid, cond_cap)
    if not valid[0]:
        raise SingularJacobian(f"flow Jacobian condition number exceeds {cond_cap:g}")
    return G


class TraveltimeProblem:
    """Neumann-series interface for ``G lambda = d`` on the fine nodes of a region.

    The speed update lives on the speed lattice itself, so ``P`` is the
    identity here: ``G`` contains gradients of ``lambda`` and excites
    checkerboard modes that a restriction/prolongation pair cannot carry.
    ``Lambda = G^T / s`` with the scalar ``s`` the mean squared column norm
    of ``G``; with a scalar weight ``A*A`` stays symmetric and the error
    operator ``K = Id - (A*A - delta Lap)^{-1} A*A`` has its spectrum in [0, 1].
    """

    def __init__(self, G, region, delta=DELTA_TRAVELTIME, bc="neumann"):
        self.region = region
        Gr = sp.csr_matrix(G)[:, region.idx]
        col2 = np.asarray(Gr.multiply(Gr).sum(axis=0)).ravel()
        scale = float(np.mean(col2[col2 > 0])) if np.any(col2 > 0) else 1.0
        self.scale = scale
        self.normal = NormalOperator(Gr, np.full(region.n, scale), regularizer(region, bc), delta)

    @property
    def n_coarse(self):
        return self.region.n

    def backproject(self, d):
        return self.normal.adjoint(np.asarray(d, float).ravel())

    def simulate(self, g):
        return self.normal.forward(g)

    def approx_inverse(self, r):
        return self.normal.solve(r)


def invert_update(meas, gn, region, n_terms=DEFAULT_TERMS, delta=DELTA_TRAVELTIME, step=None, bc="neumann"):
    """One linearised update ``lambda`` on ``region`` (fine-grid GridFunction).

    Returns ``(lambda, mismatch, NeumannResult)``.
    """
    if len(meas) == 0:
        raise NoValidRays("no measurements for this region")
    speed = gn.speed if isinstance(gn, MetricIterate) else gn
    step = TraveltimeConfig().step_for(speed) if step is None else step
    mis, geos = compute_mismatch(meas, speed, step)
    G, valid = linearized_rows(geos, speed, region.grid)
    if not np.any(valid):
        raise NoValidRays("every ray had a singular flow Jacobian")
    d = np.where(np.repeat(valid, 6), mis.d.ravel(), 0.0)
    problem = TraveltimeProblem(G, region, delta, bc)
    res = neumann_series(problem, d, n_terms)
    lam = region.scatter(res.values, "fine")
    return lam, mis, res


@dataclass
class TraveltimeResult:
    iterate: MetricIterate
    log: list = field(default_factory=list)
    clamped: int = 0


def speed_lattice(grid, values):
    """GriddedSpeed on the fine grid's lattice."""
    return GriddedSpeed(grid.origin, grid.h, np.asarray(values, float).reshape(grid.shape))


def solve_traveltime(meas, g0, partition, cfg=None):
    """Outer-to-inner speed recovery.

    ``g0`` is a GriddedSpeed on ``partition.grid``'s lattice.  For each disk
    of each processed shell, ``cfg.sweeps`` linearised updates are applied
    to a private copy of the speed; a shell's final speed is the mean over
    the disks covering each node.  Rays are assigned to disks by tracing
    them under the speed at the start of the shell.
    """
    cfg = cfg or TraveltimeConfig()
    grid = partition.grid
    if g0.shape != grid.shape or not np.allclose(g0.origin, grid.origin) or not np.allclose(g0.spacing, grid.h):
        raise ConfigError("the initial speed must live on the reconstruction grid's lattice")
    step = cfg.step_for(g0)
    floor = cfg.clamp_fraction * float(np.min(g0.values))
    current = g0.values.ravel().copy()
    shells = range(1, partition.k + 1) if cfg.layers is None else cfg.layers
    result = TraveltimeResult(MetricIterate(speed_lattice(grid, current), 0))
    for i in shells:
        known = partition.known_mask(i).ravel()
        speed = speed_lattice(grid, current)
        geos = trace_many(partition.domain, speed, meas.initial, TracerConfig(step))
        alive = np.array([j for j, g in enumerate(geos) if g is not None], dtype=np.int64)
        layer, bands = ray_keys(partition, [geos[j] for j in alive])
        merger = DiskMerger(grid.n_total)
        for disk in partition.disks[i - 1]:
            rows = alive[disk_members(disk, layer, bands)]
            if len(rows) == 0:
                continue
            sub = meas.subset(rows)
            touched = np.zeros(grid.n_total, bool)
            touched[stencil_nodes(np.concatenate([geos[j].x for j in rows]), grid)] = True
            unknown = touched & grid.support.ravel() & ~known
            unknown[disk.nodes] = True
            region = Region(grid, unknown.reshape(grid.shape))
            local = current.copy()
            history = []
            for sweep in range(cfg.sweeps):
                lam, mis, res = invert_update(sub, speed_lattice(grid, local), region, cfg.n_terms,
                                              cfg.delta, step, cfg.bc)
                local[region.idx] += lam.values.ravel()[region.idx]
                low = local < floor
                if np.any(low):
                    result.clamped += int(low.sum())
                    local[low] = floor
                history.append({"mismatch": mis.norm, "update": float(np.linalg.norm(lam.values))})
            merger.add(disk.nodes, local[disk.nodes])
            result.log.append({"disk": disk.key, "rays": len(rows), "unknowns": region.n, "sweeps": history})
        hit, mean, missed = merger.mean(np.flatnonzero(partition.layer_of.ravel() == i))
        current[hit] = mean
        log.info("shell %d: %d disks, %d of %d nodes updated", i, len(partition.disks[i - 1]), len(hit),
                 len(hit) + len(missed))
    if result.clamped:
        log.warning("speed clamped at %g on %d node updates", floor, result.clamped)
    result.iterate = MetricIterate(speed_lattice(grid, current), len(list(shells)))
    return result


def layer_speed_errors(speed, truth, partition, layers=None, background=None):
    """Relative L2 speed error per shell over inside fine nodes.

    With a scalar ``background`` the error is measured relative to the
    perturbation ``truth - background`` instead of ``truth``.
    """
    grid = partition.grid
    pts = grid.coords()[grid.inside]
    lay = partition.layer_of[grid.inside]
    rec = speed.values[grid.inside]
    ref = truth.speed(pts)
    scale = ref if background is None else ref - background
    out = {}
    for i in (range(1, partition.k + 1) if layers is None else layers):
        m = lay == i
        den = np.linalg.norm(scale[m])
        out[i] = float(np.linalg.norm(rec[m] - ref[m]) / den) if den > 0 else float("nan")
    return out
