"""Classical RK4 integration of the Hamiltonian ray equations.

States are 6-vectors ``(x, xi)``.  All integrators work on batches of rays
at once; a single-ray call is a batch of one.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import TrappedRay
from .metric import PhasePoint

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TracerConfig:
    step: float = 0.01
    max_steps: int | None = None

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError("step must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be positive")

    def steps_for(self, domain):
        if self.max_steps is not None:
            return self.max_steps
        return 10 * math.ceil(2 * domain.radius / self.step)


@dataclass(eq=False)
class Geodesic:
    """RK4 samples ``(s_i, x_i, xi_i)`` of one ray.

    ``speed`` holds ``c(x_i)`` so quadratures can form ``|x'| = c^2 |xi|``
    without the field; ``J`` is filled only by the Jacobian tracer.
    """

    s: np.ndarray
    x: np.ndarray
    xi: np.ndarray
    speed: np.ndarray
    exited: bool
    J: np.ndarray | None = None

    @property
    def exit_time(self):
        return float(self.s[-1])

    @property
    def n_samples(self):
        return len(self.s)

    @property
    def start(self):
        return PhasePoint(self.x[0], self.xi[0])

    @property
    def end_state(self):
        return np.concatenate([self.x[-1], self.xi[-1]])

    def velocity_norm(self):
        return self.speed**2 * np.linalg.norm(self.xi, axis=1)


@dataclass(eq=False)
class JacobianState:
    J: np.ndarray  # (n_samples, 6, 6)


# --- vector field ----------------------------------------------------------

def _assemble_m(c, g, H, xi):
    n = len(c)
    p2 = np.sum(xi**2, axis=1)
    M = np.zeros((n, 6, 6))
    M[:, :3, :3] = 2 * c[:, None, None] * xi[:, :, None] * g[:, None, :]
    M[:, :3, 3:] = (c**2)[:, None, None] * np.eye(3)
    M[:, 3:, :3] = -(H * c[:, None, None] + g[:, :, None] * g[:, None, :]) * p2[:, None, None]
    M[:, 3:, 3:] = -2 * c[:, None, None] * g[:, :, None] * xi[:, None, :]
    return M


def _field(field, Y, with_j):
    x, xi = Y[:, :3], Y[:, 3:]
    if with_j:
        c, g, H = field.local(x, hessian=True)
    else:
        (c, g), H = field.local(x), None
    p2 = np.sum(xi**2, axis=1)
    dY = np.concatenate([(c**2)[:, None] * xi, -(c * p2)[:, None] * g], axis=1)
    M = _assemble_m(c, g, H, xi) if with_j else None
    return dY, M


def ode_rhs(field, p):
    """Hamiltonian vector field ``(c^2 xi, -c grad(c) |xi|^2)``."""
    y = p.state if isinstance(p, PhasePoint) else np.asarray(p, float)
    dY, _ = _field(field, y.reshape(-1, 6), False)
    return dY.reshape(y.shape)


def m_matrix(field, p):
    """Linearisation of the vector field, the 6x6 matrix driving ``dJ/ds = M J``."""
    y = p.state if isinstance(p, PhasePoint) else np.asarray(p, float)
    yy = y.reshape(-1, 6)
    c, g, H = field.local(yy[:, :3], hessian=True)
    M = _assemble_m(np.atleast_1d(c), g.reshape(-1, 3), H.reshape(-1, 3, 3), yy[:, 3:])
    return M.reshape(y.shape[:-1] + (6, 6))


def rk4_step(field, Y, h, J=None):
    """One classical RK4 step with per-ray step sizes ``h`` (shape (n,))."""
    h = np.broadcast_to(np.asarray(h, float), (len(Y),))[:, None]
    with_j = J is not None
    k1, m1 = _field(field, Y, with_j)
    k2, m2 = _field(field, Y + 0.5 * h * k1, with_j)
    k3, m3 = _field(field, Y + 0.5 * h * k2, with_j)
    k4, m4 = _field(field, Y + h * k3, with_j)
    Yn = Y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    if not with_j:
        return Yn, None
    hh = h[:, :, None]
    j1 = m1 @ J
    j2 = m2 @ (J + 0.5 * hh * j1)
    j3 = m3 @ (J + 0.5 * hh * j2)
    j4 = m4 @ (J + hh * j3)
    return Yn, J + hh / 6.0 * (j1 + 2 * j2 + 2 * j3 + j4)


# --- integrators -----------------------------------------------------------

def _gather(n, log_ids, log_s, log_y, log_j):
    ids = np.concatenate(log_ids)
    order = np.argsort(ids, kind="stable")
    ids = ids[order]
    s = np.concatenate(log_s)[order]
    y = np.concatenate(log_y)[order]
    jj = np.concatenate(log_j)[order] if log_j else None
    bounds = np.searchsorted(ids, np.arange(n + 1))
    return [(s[a:b], y[a:b], None if jj is None else jj[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]


def _refine_exit(domain, field, Y, J, h, q0, q1, iters=12):
    """Partial RK4 step landing on the boundary sphere (Newton on the fraction)."""
    tau = np.clip(q0 / (q0 - q1), 0.0, 1.0)
    r2 = domain.radius**2
    tol = 1e-14 * r2
    for _ in range(iters):
        Yt, _ = rk4_step(field, Y, tau * h)
        d = Yt[:, :3] - domain.center
        q = np.sum(d**2, axis=1) - r2
        if np.all(np.abs(q) <= tol):
            break
        c = field.speed(Yt[:, :3])
        dq = 2 * np.sum(d * (c**2)[:, None] * Yt[:, 3:], axis=1) * h
        dq = np.where(np.abs(dq) > 1e-300, dq, 1e-300)
        tau = np.clip(tau - q / dq, 0.0, 1.0)
    Yt, Jt = rk4_step(field, Y, tau * h, J)
    return Yt, Jt, tau * h


def trace_many(domain, field, states, cfg=None, jacobian=False, on_trapped="skip"):
    """Trace a batch of rays until they leave the ball.

    Parameters
    ----------
    states : (n, 6) array of initial ``(x, xi)``
    jacobian : co-integrate ``dJ/ds = M J`` with ``J(0) = I``
    on_trapped : ``"skip"`` returns ``None`` for rays that graze out on the
        first step or exhaust ``max_steps``; ``"raise"`` raises TrappedRay.

    Returns
    -------
    list of Geodesic or None, in input order.
    """
    cfg = cfg or TracerConfig()
    Y = np.array(states, dtype=float).reshape(-1, 6)
    n = len(Y)
    if n == 0:
        return []
    h = cfg.step
    max_steps = cfg.steps_for(domain)
    r2 = domain.radius**2
    J = np.broadcast_to(np.eye(6), (n, 6, 6)).copy() if jacobian else None
    ids = np.arange(n)
    s = np.zeros(n)
    q = np.sum((Y[:, :3] - domain.center) ** 2, axis=1) - r2
    on_bd = np.abs(q) <= 2 * domain.radius * domain.tol_bd
    log_ids, log_s, log_y, log_j = [ids.copy()], [s.copy()], [Y.copy()], ([J.copy()] if jacobian else [])
    status = np.zeros(n, dtype=np.int8)  # 0 running, 1 exited, 2 grazing/trapped
    for k in range(1, max_steps + 1):
        if len(ids) == 0:
            break
        Yn, Jn = rk4_step(field, Y, h, J)
        qn = np.sum((Yn[:, :3] - domain.center) ** 2, axis=1) - r2
        out = qn >= 0
        graze = out & ((q >= 0) | ((k == 1) & on_bd[ids]))
        leave = out & ~graze
        keep = ~out
        if np.any(leave):
            Ye, Je, dt = _refine_exit(domain, field, Y[leave], None if J is None else J[leave], h, q[leave], qn[leave])
            log_ids.append(ids[leave]); log_s.append(s[leave] + dt); log_y.append(Ye)
            if jacobian:
                log_j.append(Je)
            status[ids[leave]] = 1
        status[ids[graze]] = 2
        s = s + h
        log_ids.append(ids[keep]); log_s.append(s[keep]); log_y.append(Yn[keep])
        if jacobian:
            log_j.append(Jn[keep])
        ids, Y, q, s = ids[keep], Yn[keep], qn[keep], s[keep]
        if jacobian:
            J = Jn[keep]
    status[ids] = 2
    pieces = _gather(n, log_ids, log_s, log_y, log_j)
    out_list = []
    n_bad = 0
    all_x = np.concatenate([p[1][:, :3] for p in pieces])
    all_c = np.asarray(field.speed(all_x))
    offsets = np.cumsum([0] + [len(p[0]) for p in pieces])
    for i, (si, yi, ji) in enumerate(pieces):
        if status[i] != 1:
            n_bad += 1
            if on_trapped == "raise":
                raise TrappedRay(f"ray {i} did not exit cleanly after {max_steps} steps")
            out_list.append(None)
            continue
        out_list.append(Geodesic(si, yi[:, :3].copy(), yi[:, 3:].copy(), all_c[offsets[i]:offsets[i + 1]], True, ji))
    if n_bad:
        log.warning("discarded %d of %d rays (grazing or trapped)", n_bad, n)
    return out_list


def trace(domain, field, x0, cfg=None):
    """Trace one ray from ``x0`` (a PhasePoint or 6-vector) to its exit."""
    y = x0.state if isinstance(x0, PhasePoint) else np.asarray(x0, float)
    return trace_many(domain, field, y[None], cfg, on_trapped="raise")[0]


def trace_with_jacobian(domain, field, x0, cfg=None):
    y = x0.state if isinstance(x0, PhasePoint) else np.asarray(x0, float)
    geo = trace_many(domain, field, y[None], cfg, jacobian=True, on_trapped="raise")[0]
    return geo, JacobianState(geo.J)


def trace_for_time(field, states, t_end, step, jacobian=False):
    """Integrate each ray for exactly ``t_end[i]`` time units (no exit test).

    The last step is shortened so the final sample sits at ``t_end``.
    Returns a list of Geodesic with ``exited=False``.
    """
    Y = np.array(states, dtype=float).reshape(-1, 6)
    n = len(Y)
    t_end = np.broadcast_to(np.asarray(t_end, float), (n,))
    J = np.broadcast_to(np.eye(6), (n, 6, 6)).copy() if jacobian else None
    ids = np.arange(n)
    s = np.zeros(n)
    log_ids, log_s, log_y, log_j = [ids.copy()], [s.copy()], [Y.copy()], ([J.copy()] if jacobian else [])
    while len(ids):
        hh = np.minimum(step, t_end[ids] - s)
        Y, J = rk4_step(field, Y, hh, J)
        s = np.where(hh < step, t_end[ids], s + hh)
        log_ids.append(ids.copy()); log_s.append(s.copy()); log_y.append(Y.copy())
        if jacobian:
            log_j.append(J.copy())
        alive = s < t_end[ids] - 1e-14 * np.maximum(1.0, t_end[ids])
        ids, Y, s = ids[alive], Y[alive], s[alive]
        if jacobian:
            J = J[alive]
    pieces = _gather(n, log_ids, log_s, log_y, log_j)
    all_x = np.concatenate([p[1][:, :3] for p in pieces])
    all_c = np.asarray(field.speed(all_x))
    offsets = np.cumsum([0] + [len(p[0]) for p in pieces])
    return [Geodesic(si, yi[:, :3].copy(), yi[:, 3:].copy(), all_c[offsets[i]:offsets[i + 1]], False, ji)
            for i, (si, yi, ji) in enumerate(pieces)]
