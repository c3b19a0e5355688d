"""Layer stripping.

The ball is cut into ``k`` shells of equal thickness by the depth
``rho(x) = radius - |x - center|``.  Each shell is sliced into one-node-thick
slabs ("disks") perpendicular to a few directions.  Rays for a disk enter
through the middle circle of the slab and turn inside the shell, so the only
unknowns they see are the disk's own nodes plus the already reconstructed
outer shells.  Shells are processed from the outside in; a node covered by
several disks gets the average of their estimates.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EmptyLayer, NoValidRays
from .grids import GridFunction, Region
from .metric import normalize_momentum
from .neumann import DEFAULT_TERMS, DELTA_XRAY, XRayProblem, neumann_series
from .tracer import TracerConfig, trace_many
from .xray import forward_matrix

log = logging.getLogger(__name__)

RAY_BUDGET = 900
_DIAG = 1.0 / math.sqrt(3.0)
DEFAULT_DIRECTIONS = np.array([
    [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0],
    [_DIAG, _DIAG, _DIAG], [_DIAG, -_DIAG, _DIAG], [_DIAG, _DIAG, -_DIAG], [-_DIAG, _DIAG, _DIAG],
])
_BAND_SLACK = 1e-9


@dataclass(eq=False)
class Disk:
    """One slab of one shell.

    ``direction`` is None for the whole-shell disk used when no slicing is
    requested; ``offset`` is the signed distance of the slab's mid-plane
    from the center along ``direction``.
    """

    layer: int
    direction: np.ndarray | None
    band: int
    nodes: np.ndarray                      # flat fine-lattice indices
    partition: "LayerPartition" = field(repr=False)

    @property
    def offset(self):
        return self.band * self.partition.grid.h

    @property
    def key(self):
        return (self.layer, self.direction_index, self.band)

    @property
    def direction_index(self):
        d = self.partition.directions
        if d is None:
            return -1
        return int(np.argmax(d @ self.direction))

    @property
    def ring_radius(self):
        """Radius of the circle where the mid-plane meets the boundary sphere."""
        r2 = self.partition.domain.radius**2 - self.offset**2
        return math.sqrt(r2) if r2 > 0 else 0.0


@dataclass(eq=False)
class LayerPartition:
    domain: object
    grid: object
    k: int
    directions: np.ndarray | None
    layer_of: np.ndarray                   # lattice-shaped, 0 off the support
    disks: list                            # disks[i - 1] = disks of shell i

    @property
    def thickness(self):
        return self.domain.radius / self.k

    def bounds(self, i):
        """Depth interval ``[t_i, t_{i+1})`` of shell ``i``; the last shell is open."""
        t = self.thickness
        return (i - 1) * t, (i * t if i < self.k else math.inf)

    def layer_index(self, depth):
        depth = np.asarray(depth, float)
        i = np.floor(depth / self.thickness + 1e-12).astype(np.int64) + 1
        return np.clip(i, 1, self.k)

    def layer_mask(self, i):
        return self.layer_of == i

    def known_mask(self, i):
        return (self.layer_of >= 1) & (self.layer_of < i)

    def all_disks(self):
        return [d for layer in self.disks for d in layer]


def _unit_directions(directions):
    d = np.asarray(directions, float).reshape(-1, 3)
    n = np.linalg.norm(d, axis=1)
    if len(d) == 0 or np.any(n == 0):
        raise ConfigError("directions must be non-zero 3-vectors")
    return d / n[:, None]


def build_partition(domain, grid, k, directions=DEFAULT_DIRECTIONS):
    """Shells by depth and, per direction, slabs one grid step thick.

    Every support node goes to exactly one shell (nodes just outside the
    ball join the outermost one, the center region joins the innermost).
    ``directions=None`` keeps each shell whole.
    """
    if int(k) != k or k < 1:
        raise ConfigError("the layer count k must be a positive integer")
    k = int(k)
    dirs = None if directions is None else _unit_directions(directions)
    pts = grid.coords()
    depth = domain.radius - np.linalg.norm(pts - domain.center, axis=-1)
    part = LayerPartition(domain, grid, k, dirs, np.zeros(grid.shape, np.int64), [])
    part.layer_of[grid.support] = part.layer_index(np.maximum(depth[grid.support], 0.0))
    rel = (pts - domain.center).reshape(-1, 3)
    for i in range(1, k + 1):
        nodes = np.flatnonzero(part.layer_of.ravel() == i)
        if len(nodes) == 0:
            raise EmptyLayer(f"shell {i} of {k} contains no grid nodes; use fewer layers or a finer grid")
        disks = []
        if dirs is None:
            disks.append(Disk(i, None, 0, nodes, part))
        else:
            for d in dirs:
                band = np.rint(rel[nodes] @ d / grid.h).astype(np.int64)
                for b in np.unique(band):
                    disks.append(Disk(i, d, int(b), nodes[band == b], part))
        part.disks.append(disks)
    return part


def _plane_basis(d):
    a = np.eye(3)[np.argmin(np.abs(d))]
    e1 = np.cross(d, a)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(d, e1)


def _fibonacci_sphere(n):
    j = np.arange(n) + 0.5
    z = 1.0 - 2.0 * j / n
    phi = j * math.pi * (3.0 - math.sqrt(5.0))
    rxy = np.sqrt(1.0 - z**2)
    return np.stack([rxy * np.cos(phi), rxy * np.sin(phi), z], axis=1)


def _split_count(count):
    n_dir = max(1, int(math.isqrt(count // 4)))
    return n_dir, max(1, count // n_dir)


def candidate_states(disk, field, count=RAY_BUDGET):
    """Untraced entry states for ``disk``, ``(m, 6)``.

    Entry points are evenly spaced on the slab's boundary circle.  From each
    one, ``n_dir`` in-plane directions aim (along straight chords) at turning
    depths spread evenly through the shell, alternating the side they turn to.
    """
    if count < 1:
        raise ConfigError("ray count must be >= 1")
    part = disk.partition
    dom = part.domain
    r = dom.radius
    n_dir, n_pts = _split_count(int(count))
    t0 = part.bounds(disk.layer)[0]
    thick = min(part.thickness, r - t0)
    target = t0 + (np.arange(n_dir) + 0.5) * thick / n_dir
    if disk.direction is None:
        radial = _fibonacci_sphere(n_pts)
        ref = np.where(np.abs(radial[:, 2:3]) < 0.9, [[0.0, 0.0, 1.0]], [[1.0, 0.0, 0.0]])
        t1 = np.cross(radial, ref)
        t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
        t2 = np.cross(radial, t1)
        entry = dom.center + r * radial
        ring = r
        offset = 0.0
    else:
        e1, e2 = _plane_basis(disk.direction)
        phi = 2.0 * math.pi * np.arange(n_pts) / n_pts
        radial = np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2
        t1 = -np.sin(phi)[:, None] * e1 + np.cos(phi)[:, None] * e2
        t2 = None
        ring = disk.ring_radius
        offset = disk.offset
        entry = dom.center + offset * disk.direction + ring * radial
    if ring <= 0:
        return np.zeros((0, 6))
    impact = np.sqrt(np.maximum((r - target) ** 2 - offset**2, 0.0))
    sin_a = np.minimum(impact / ring, 0.999)
    cos_a = np.sqrt(1.0 - sin_a**2)
    states = []
    for m in range(n_dir):
        side = 1.0 if m % 2 == 0 else -1.0
        if t2 is None:
            tang = side * t1
        else:
            ang = m * math.pi * (3.0 - math.sqrt(5.0)) + np.arange(n_pts)
            tang = side * (np.cos(ang)[:, None] * t1 + np.sin(ang)[:, None] * t2)
        v = -cos_a[m] * radial + sin_a[m] * tang
        states.append(np.hstack([entry, normalize_momentum(field, entry, v)]))
    return np.vstack(states)


def ray_keys(partition, geodesics):
    """For each geodesic the ``(layer, direction index, band)`` it belongs to.

    A ray belongs to shell ``i`` when its deepest sample is in shell ``i``,
    and to a slab when all of its samples inside shell ``i`` stay within
    half a grid step of the slab's mid-plane.  Returns ``(layer, bands)``
    with ``bands[:, j]`` the band index for direction ``j`` or a large
    sentinel where the ray leaves every slab of that direction.
    """
    n = len(geodesics)
    dirs = partition.directions
    nd = 0 if dirs is None else len(dirs)
    layer = np.zeros(n, np.int64)
    bands = np.full((n, nd), np.iinfo(np.int64).min, np.int64)
    if n == 0:
        return layer, bands
    dom, h = partition.domain, partition.grid.h
    lens = np.array([g.n_samples for g in geodesics])
    starts = np.concatenate([[0], np.cumsum(lens)[:-1]])
    rel = np.concatenate([g.x for g in geodesics]) - dom.center
    depth = dom.radius - np.linalg.norm(rel, axis=1)
    deepest = np.maximum.reduceat(depth, starts)
    layer = partition.layer_index(np.maximum(deepest, 0.0))
    ray_of = np.repeat(np.arange(n), lens)
    t_lo = (layer - 1) * partition.thickness
    in_layer = depth >= t_lo[ray_of] - 1e-12
    arg = np.flatnonzero(depth == deepest[ray_of])
    first_deep = np.full(n, -1)
    first_deep[ray_of[arg[::-1]]] = arg[::-1]
    for j in range(nd):
        proj = rel @ dirs[j]
        b = np.rint(proj[first_deep] / h).astype(np.int64)
        off = np.abs(proj - b[ray_of] * h) > 0.5 * h * (1 + _BAND_SLACK)
        bad = np.add.reduceat((off & in_layer).astype(np.int64), starts)
        bands[:, j] = np.where(bad == 0, b, bands[:, j])
    return layer, bands


def disk_members(disk, layer, bands):
    """Indices of rays (from ``ray_keys``) that belong to ``disk``."""
    return np.flatnonzero(_member_mask(disk, layer, bands))


def generate_initial_conditions(disk, field, count=RAY_BUDGET, cfg=None):
    """Entry states for ``disk`` whose rays stay in the disk or outer shells.

    Returns ``(states, geodesics)`` for the retained rays, states as an
    ``(m, 6)`` array of on-shell inflow phase points.
    """
    return generate_for_disks([disk], field, count, cfg)[0]


def generate_for_disks(disks, field, count=RAY_BUDGET, cfg=None, raise_empty=True, batch=20000):
    """Batch version of ``generate_initial_conditions``.

    Candidates are traced together, at most about ``batch`` rays at a time.
    """
    cfg = cfg or TracerConfig()
    if not disks:
        return []
    part = disks[0].partition
    out = []
    start = 0
    while start < len(disks):
        cand, n = [], 0
        while start + len(cand) < len(disks) and (not cand or n < batch):
            c = candidate_states(disks[start + len(cand)], field, count)
            cand.append(c)
            n += len(c)
        group = disks[start:start + len(cand)]
        states = np.vstack(cand)
        owner = np.repeat(np.arange(len(group)), [len(c) for c in cand])
        geos = trace_many(part.domain, field, states, cfg, on_trapped="skip")
        kept = np.array([i for i, g in enumerate(geos) if g is not None], dtype=np.int64)
        layer, bands = ray_keys(part, [geos[i] for i in kept])
        for j, d in enumerate(group):
            mine = np.flatnonzero(owner[kept] == j)
            good = mine[_member_mask(d, layer[mine], bands[mine])]
            if len(good) == 0 and raise_empty:
                raise NoValidRays(f"no retained rays for disk {d.key}")
            idx = kept[good]
            out.append((states[idx], [geos[i] for i in idx]))
        start += len(cand)
    return out


def _member_mask(disk, layer, bands):
    sel = layer == disk.layer
    if disk.direction is not None:
        sel &= bands[:, disk.direction_index] == disk.band
    return sel


class DiskMerger:
    """Average the values several disks assign to the same nodes.

    ``add(nodes, values)`` accumulates ``values[..., j]`` at flat node
    ``nodes[j]``; ``mean(nodes)`` returns the averages there and the subset
    of ``nodes`` that no disk reached.
    """

    def __init__(self, n_total, lead=()):
        self.sums = np.zeros(tuple(lead) + (n_total,))
        self.count = np.zeros(n_total)

    def add(self, nodes, values):
        self.sums[..., nodes] += values
        self.count[nodes] += 1

    def mean(self, nodes):
        nodes = np.asarray(nodes)
        hit = nodes[self.count[nodes] > 0]
        return hit, self.sums[..., hit] / self.count[hit], nodes[self.count[nodes] == 0]


@dataclass
class StripResult:
    """Merged reconstruction on the coarse grid.

    ``terms[n]`` holds the merged partial sums after ``n + 1`` series terms
    (shape ``(n_rhs, n_total)``); inner shells are always computed from the
    final values of the outer ones.  ``disks`` logs one dict per solved disk.
    """

    grid: object
    terms: np.ndarray
    disks: list
    uncovered: int

    def field(self, n=-1, rhs=0):
        return GridFunction(self.grid, self.terms[n, rhs].reshape(self.grid.shape))

    @property
    def values(self):
        return self.field()


def strip_reconstruct(data, partition, n_terms=DEFAULT_TERMS, delta=DELTA_XRAY, eps=None, bc="dirichlet"):
    """Outer-to-inner Neumann-series reconstruction, disk by disk.

    ``data`` is an XRayDataSet; its ``values`` may carry several right-hand
    sides as an ``(n_rays, q)`` array (``data.meta["values"]``) so one pass
    over the disks serves several test functions.  Each disk uses the rays
    whose deepest shell and slab match it; the contribution of the outer,
    already reconstructed shells is subtracted from their data first.
    """
    geos = data.geodesics
    values = np.asarray(data.meta.get("values", data.values), float)
    if values.ndim == 1:
        values = values[:, None]
    q = values.shape[1]
    grid = partition.grid
    cgrid = grid.coarse()
    layer, bands = ray_keys(partition, geos)
    terms = np.zeros((n_terms + 1, q, grid.n_total))
    coarse_layer = np.where(cgrid.support, partition.layer_of, 0).ravel()
    log_rows, uncovered = [], 0
    for i in range(1, partition.k + 1):
        known_mask = partition.known_mask(i)
        known = Region(grid, known_mask)
        known_fine = known.prolongation @ terms[-1][:, known.coarse_idx].T
        merger = DiskMerger(grid.n_total, (n_terms + 1, q))
        for disk in partition.disks[i - 1]:
            rows = disk_members(disk, layer, bands)
            if len(rows) == 0:
                log.debug("disk %s has no rays", disk.key)
                continue
            sub = [geos[r] for r in rows]
            A = forward_matrix(sub, grid)
            unknown = np.zeros(grid.n_total, bool)
            unknown[np.unique(A.indices)] = True
            unknown &= ~known_mask.ravel()
            unknown[disk.nodes] = True
            region = Region(grid, unknown.reshape(grid.shape))
            problem = XRayProblem(sub, region, delta, eps, bc, A_full=A)
            rhs = values[rows] - A[:, known.idx] @ known_fine
            mine = np.isin(region.coarse_idx, disk.nodes)
            nodes = region.coarse_idx[mine]
            vals = np.zeros((n_terms + 1, q, len(nodes)))
            incs = []
            for j in range(q):
                res = neumann_series(problem, rhs[:, j], n_terms)
                vals[:, j] = np.array(res.partial_sums)[:, mine]
                incs.append(res.increments)
            merger.add(nodes, vals)
            log_rows.append({"disk": disk.key, "rays": len(rows), "unknowns": region.n, "increments": incs})
        hit, mean, missed = merger.mean(np.flatnonzero(coarse_layer == i))
        terms[:, :, hit] = mean
        uncovered += len(missed)
        log.info("shell %d/%d: %d disks, %d of %d coarse nodes covered", i, partition.k,
                 len(partition.disks[i - 1]), len(hit), len(hit) + len(missed))
    if uncovered:
        log.warning("%d coarse nodes were not covered by any disk and were left at 0", uncovered)
    return StripResult(cgrid, terms, log_rows, uncovered)


def layer_errors(result, truth, partition, n=-1, rhs=0):
    """Relative L2 error per shell over inside coarse nodes (NaN for empty shells)."""
    cg = result.grid
    rec = result.terms[n, rhs]
    ref = truth.values.ravel()
    lay = partition.layer_of.ravel()
    inside = cg.inside.ravel()
    out = []
    for i in range(1, partition.k + 1):
        m = inside & (lay == i)
        den = np.linalg.norm(ref[m])
        out.append(float(np.linalg.norm(rec[m] - ref[m]) / den) if den > 0 else float("nan"))
    return out
