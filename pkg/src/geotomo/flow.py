"""Geodesic flow: fixed-step RK4 with bisection exit location, distances, Jacobi fields.

All integrators are vectorised over a batch of geodesics.  The state of one
geodesic is a row ``[x, y, vx, vy, *extra]``; extra columns are integrated
alongside by the same RK4 stages (line integrals, Jacobi fields).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .geometry import BoundaryChart, MetricField

EXITED, MAX_STEPS, LEFT_CHART = "exited", "max_steps", "left_chart"
_STATUS = np.array([EXITED, MAX_STEPS, LEFT_CHART])
BISECT_ITERS = 52


class ShootingError(RuntimeError):
    pass


class LeavesDomainError(ValueError):
    pass


@dataclass(frozen=True)
class FlowOptions:
    step: float = 1e-3
    max_steps: Optional[int] = None
    radius: float = 1.0

    def steps_cap(self) -> int:
        if self.max_steps is not None:
            return self.max_steps
        return int(np.ceil(10 * (2 * self.radius / self.step)))


@dataclass(frozen=True)
class PhasePoint:
    """A point of the unit sphere bundle: position and frame angle of xi."""

    x: np.ndarray
    beta: float

    def velocity(self, m: MetricField) -> np.ndarray:
        return np.array(m.unit_vector(self.x[0], self.x[1], self.beta))


@dataclass
class GeodesicRecord:
    t: np.ndarray            # (n,)
    states: np.ndarray       # (n, 4): x, y, vx, vy
    tau: float
    exit: PhasePoint
    status: str
    start: np.ndarray = field(repr=False, default=None)


@dataclass
class JacobiRecord:
    along: GeodesicRecord
    J: np.ndarray   # (n, 2)
    DJ: np.ndarray  # (n, 2)


@dataclass
class BatchResult:
    state: np.ndarray        # final rows (exit state for exited ones)
    tau: np.ndarray
    status: np.ndarray       # strings
    trail: Optional[list] = None  # list of (t, rows) snapshots when recorded

    @property
    def exited(self):
        return self.status == EXITED


# ------------------------------------------------------------------ core stepping


def _rhs(m: MetricField, S: np.ndarray, extra) -> np.ndarray:
    x, y, vx, vy = S[:, 0], S[:, 1], S[:, 2], S[:, 3]
    out = np.empty_like(S)
    out[:, 0] = vx
    out[:, 1] = vy
    ax, ay = m.geodesic_accel(x, y, vx, vy)
    out[:, 2] = ax
    out[:, 3] = ay
    if S.shape[1] > 4:
        out[:, 4:] = extra(S)
    return out


def rk4_step(m: MetricField, S: np.ndarray, h, extra=None) -> np.ndarray:
    h = np.asarray(h, float)
    if h.ndim:
        h = h[:, None]
    k1 = _rhs(m, S, extra)
    k2 = _rhs(m, S + 0.5 * h * k1, extra)
    k3 = _rhs(m, S + 0.5 * h * k2, extra)
    k4 = _rhs(m, S + h * k3, extra)
    return S + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate_batch(m: MetricField, S0: np.ndarray, opts: FlowOptions = FlowOptions(),
                    extra: Callable | None = None, record: bool = False,
                    on_step: Callable | None = None) -> BatchResult:
    """Integrate rows of S0 until each one crosses ``|x| = opts.radius``.

    The crossing is located by bisecting the fraction of the last RK4 step
    on ``|x|^2 - R^2``.  ``on_step(idx, rows, t)`` is called after every
    completed full step for the rows still inside.
    """
    S = np.array(S0, dtype=float, copy=True)
    n = S.shape[0]
    h = opts.step
    R2 = opts.radius ** 2
    t = np.zeros(n)
    code = np.full(n, 1)  # 0 exited, 1 max_steps, 2 left_chart
    active = np.arange(n)
    pending_idx, pending_rows = [], []
    trail = [(t.copy(), S.copy())] if record else None
    cap = opts.steps_cap()
    for _ in range(cap):
        if active.size == 0:
            break
        Sa = S[active]
        with np.errstate(all="ignore"):
            Sn = rk4_step(m, Sa, h, extra)
        good = np.isfinite(Sn).all(axis=1)
        r2 = Sn[:, 0] ** 2 + Sn[:, 1] ** 2
        crossed = good & (r2 >= R2)
        stay = good & ~crossed
        if np.any(~good):
            code[active[~good]] = 2
        if np.any(crossed):
            pending_idx.append(active[crossed])
            pending_rows.append(Sa[crossed])
        keep = active[stay]
        S[keep] = Sn[stay]
        t[keep] += h
        active = keep
        if on_step is not None and keep.size:
            on_step(keep, S[keep], t[keep])
        if record:
            trail.append((t.copy(), S.copy()))
    if pending_idx:
        idx = np.concatenate(pending_idx)
        rows = np.concatenate(pending_rows)
        theta = _bisect_exit(m, rows, h, R2, extra)
        S[idx] = rk4_step(m, rows, theta * h, extra)
        t[idx] += theta * h
        code[idx] = 0
        if record:
            trail.append((t.copy(), S.copy()))
    return BatchResult(S, t, _STATUS[code], trail)


def _bisect_exit(m, rows, h, R2, extra):
    lo = np.zeros(rows.shape[0])
    hi = np.ones(rows.shape[0])
    for _ in range(BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        Sm = rk4_step(m, rows, mid * h, extra)
        out = Sm[:, 0] ** 2 + Sm[:, 1] ** 2 > R2
        hi = np.where(out, mid, hi)
        lo = np.where(out, lo, mid)
    return hi


def flow_for(m: MetricField, S0: np.ndarray, T, step: float = 1e-3, extra=None) -> np.ndarray:
    """Flow rows of S0 for (signed, per-row) time T with no exit detection."""
    S = np.array(S0, float, copy=True)
    T = np.broadcast_to(np.asarray(T, float), (S.shape[0],))
    nsteps = max(1, int(np.ceil(np.max(np.abs(T)) / step - 1e-9))) if T.size else 1
    h = T / nsteps
    for _ in range(nsteps):
        S = rk4_step(m, S, h, extra)
    return S


# ------------------------------------------------------------------ single geodesics


def start_state(m: MetricField, x, beta) -> np.ndarray:
    x = np.asarray(x, float)
    vx, vy = m.unit_vector(x[..., 0], x[..., 1], beta)
    return np.stack([x[..., 0] + 0 * vx, x[..., 1] + 0 * vx, vx, vy], -1)


def integrate_geodesic(m: MetricField, start: PhasePoint, opts: FlowOptions = FlowOptions()
                       ) -> GeodesicRecord:
    """Integrate one geodesic from ``start`` to the boundary, keeping every step."""
    S0 = start_state(m, np.asarray(start.x, float)[None, :], np.array([start.beta]))
    res = integrate_batch(m, S0, opts, record=True)
    ts = np.array([tr[0][0] for tr in res.trail])
    states = np.array([tr[1][0, :4] for tr in res.trail])
    # drop the duplicate snapshot written when the row stopped moving
    keep = np.concatenate([[True], np.diff(ts) > 0])
    ts, states = ts[keep], states[keep]
    status = str(res.status[0])
    if status == MAX_STEPS:
        warnings.warn("geodesic hit max_steps: possible trapping (metric may not be simple)")
    xe = res.state[0]
    ex = PhasePoint(xe[:2].copy(), float(m.frame_angle(xe[0], xe[1], xe[2], xe[3])))
    return GeodesicRecord(ts, states, float(res.tau[0]), ex, status, start=S0[0])


def exit_times(m: MetricField, x, beta, opts: FlowOptions = FlowOptions()) -> np.ndarray:
    S0 = start_state(m, np.asarray(x, float), np.asarray(beta, float))
    return integrate_batch(m, S0.reshape(-1, 4), opts).tau.reshape(np.shape(beta))


def exp_map(m: MetricField, x, eta, step: float = 1e-3, radius: float = 1.0) -> np.ndarray:
    """exp_x(eta): the point at g-distance |eta| along the geodesic from x in direction eta."""
    x = np.asarray(x, float)
    eta = np.asarray(eta, float)
    L = float(m.norm(x[0], x[1], eta))
    if L == 0.0:
        return x.copy()
    S0 = np.array([[x[0], x[1], eta[0] / L, eta[1] / L]])
    tau = integrate_batch(m, S0, FlowOptions(step=step, radius=radius)).tau[0]
    if L > tau + 1e-12:
        raise LeavesDomainError(f"|eta| = {L:.6g} exceeds the exit time {tau:.6g}")
    return flow_for(m, S0, L, step)[0, :2]


# ------------------------------------------------------------------ boundary distance


def _boundary_start(m: MetricField, theta, phi):
    """Rows starting at chart angle theta (on the unit circle) with inward fiber angle phi."""
    theta, phi = np.broadcast_arrays(np.asarray(theta, float), np.asarray(phi, float))
    return _boundary_start_radius(m, theta, phi, 1.0)


def exit_angle_offset(m: MetricField, theta, phi, opts: FlowOptions):
    """(theta_exit - theta) mod 2 pi and the exit time, for inward (theta, phi)."""
    S0 = _boundary_start(m, theta, phi).reshape(-1, 4)
    res = integrate_batch(m, S0, opts)
    th_e = np.arctan2(res.state[:, 1], res.state[:, 0])
    off = np.mod(th_e - np.asarray(theta, float).ravel(), 2 * np.pi)
    return off, res.tau, res


def _unwrapped_offset(m, theta, phi, target, opts):
    off, t_c, res = exit_angle_offset(m, theta, phi, opts)
    if np.any(~res.exited):
        raise ShootingError("a shooting geodesic did not exit (metric not simple?)")
    # offsets come back mod 2 pi; near the tangential ends undo the wrap
    off = np.where((phi > 0) & (off < np.pi / 2), off + 2 * np.pi, off)
    off = np.where((phi < 0) & (off > 1.5 * np.pi), off - 2 * np.pi, off)
    return off - target, t_c


def boundary_distances(m: MetricField, theta_p, theta_q, opts: FlowOptions = FlowOptions(),
                       tol: float = 1e-13, max_iter: int = 40, fan: int = 24) -> np.ndarray:
    """Lengths of the geodesics joining chart angles theta_p[i] and theta_q[i]."""
    return shoot(m, theta_p, theta_q, opts, tol, max_iter, fan)[0]


def shoot(m: MetricField, theta_p, theta_q, opts: FlowOptions = FlowOptions(),
          tol: float = 1e-13, max_iter: int = 40, fan: int = 24):
    """Vectorised shooting; returns (lengths, inward fiber angles at theta_p).

    The exit-angle offset is monotone in the entry angle on a simple disk,
    so the bracket (-pi/2, pi/2) is valid.  Two multisection passes with
    ``fan`` candidates per pair shrink it cheaply (all candidates share one
    batch), then Illinois regula falsi polishes the root.
    """
    tp = np.atleast_1d(np.asarray(theta_p, float))
    tq = np.atleast_1d(np.asarray(theta_q, float))
    target = np.mod(tq - tp, 2 * np.pi)
    out = np.zeros(tp.size)
    ang = np.full(tp.size, np.nan)
    todo = target > 1e-14
    if not np.any(todo):
        return out, ang
    tp, target = tp[todo], target[todo]
    n = tp.size
    lo = np.full(n, -np.pi / 2)
    hi = np.full(n, np.pi / 2)
    flo = -target.copy()
    fhi = 2 * np.pi - target
    # interior nodes of each bracket, fan per pair
    u = np.arange(1, fan + 1) / (fan + 1)
    for _ in range(2):
        cand = lo[:, None] + (hi - lo)[:, None] * u[None, :]
        f, _ = _unwrapped_offset(m, np.repeat(tp, fan), cand.ravel(),
                                 np.repeat(target, fan), opts)
        f = f.reshape(n, fan)
        # f is increasing along each row: locate the sign change
        k = (f <= 0).sum(axis=1)
        rows = np.arange(n)
        fl = np.concatenate([flo[:, None], f, fhi[:, None]], 1)
        cl = np.concatenate([lo[:, None], cand, hi[:, None]], 1)
        lo, flo = cl[rows, k], fl[rows, k]
        hi, fhi = cl[rows, k + 1], fl[rows, k + 1]
    phi = 0.5 * (lo + hi)
    tau = np.zeros(n)
    done = np.zeros(n, bool)
    side = np.zeros(n, int)  # +1 if hi moved last, -1 if lo moved last
    for _ in range(max_iter):
        cand = lo - flo * (hi - lo) / (fhi - flo)
        bad = ~((cand > lo) & (cand < hi)) | ~np.isfinite(cand)
        cand = np.where(bad, 0.5 * (lo + hi), cand)
        ia = np.flatnonzero(~done)
        c = cand[ia]
        f, t_c = _unwrapped_offset(m, tp[ia], c, target[ia], opts)
        phi[ia] = c
        tau[ia] = t_c
        pos = f > 0
        hi[ia[pos]] = c[pos]
        fhi[ia[pos]] = f[pos]
        lo[ia[~pos]] = c[~pos]
        flo[ia[~pos]] = f[~pos]
        # Illinois: if the same end moved twice, halve the stale end's value
        s_new = np.where(pos, 1, -1)
        again = s_new == side[ia]
        flo[ia[again & pos]] *= 0.5
        fhi[ia[again & ~pos]] *= 0.5
        side[ia] = s_new
        done[ia] = (np.abs(f) < tol) | (hi[ia] - lo[ia] < tol)
        if done.all():
            break
    else:
        raise ShootingError("boundary shooting did not converge")
    out[todo] = tau
    ang[todo] = phi
    return out, ang


def boundary_distance(m: MetricField, p: float, q: float, opts: FlowOptions = FlowOptions()) -> float:
    """g-length of the geodesic joining the boundary points at chart angles p and q."""
    return float(boundary_distances(m, [p], [q], opts)[0])


def distance_matrix(m: MetricField, thetas, opts: FlowOptions = FlowOptions()) -> np.ndarray:
    th = np.asarray(thetas, float)
    n = th.size
    i, j = np.triu_indices(n, 1)
    d = boundary_distances(m, th[i], th[j], opts)
    D = np.zeros((n, n))
    D[i, j] = d
    D[j, i] = d
    return D


# ------------------------------------------------------------------ Jacobi fields


def _jacobi_extra(m: MetricField):
    def extra(S):
        x, y = S[:, 0], S[:, 1]
        v = S[:, 2:4]
        J = S[:, 4:6]
        Y = S[:, 6:8]
        K = m.gauss_curvature(x, y)
        gJv = m.inner(x, y, J, v)
        DY = -K[:, None] * (J - gJv[:, None] * v)
        out = np.empty((S.shape[0], 4))
        out[:, 0:2] = Y - m.connection(x, y, v, J)
        out[:, 2:4] = DY - m.connection(x, y, v, Y)
        return out
    return extra


def jacobi_propagate(m: MetricField, geo: GeodesicRecord, J0, DJ0,
                     opts: FlowOptions = FlowOptions()) -> JacobiRecord:
    """Integrate D^2 J + R(J, gamma') gamma' = 0 along ``geo`` on the same RK4 grid."""
    if geo.status != EXITED:
        raise ValueError("jacobi_propagate needs an exited geodesic")
    S0 = np.concatenate([geo.start, np.asarray(J0, float), np.asarray(DJ0, float)])[None, :]
    res = integrate_batch(m, S0, opts, extra=_jacobi_extra(m), record=True)
    ts = np.array([tr[0][0] for tr in res.trail])
    rows = np.array([tr[1][0] for tr in res.trail])
    keep = np.concatenate([[True], np.diff(ts) > 0])
    rows = rows[keep]
    ref = GeodesicRecord(ts[keep], rows[:, :4], float(res.tau[0]), geo.exit, str(res.status[0]),
                         start=geo.start)
    return JacobiRecord(ref, rows[:, 4:6], rows[:, 6:8])


def wronskian(m: MetricField, a: JacobiRecord, b: JacobiRecord) -> np.ndarray:
    x, y = a.along.states[:, 0], a.along.states[:, 1]
    return m.inner(x, y, a.DJ, b.J) - m.inner(x, y, a.J, b.DJ)


# ------------------------------------------------------------------ simplicity


@dataclass
class SimplicityReport:
    convex: bool
    no_conjugate: bool
    trapped: bool
    min_second_fundamental_form: float
    first_conjugate_time: float

    @property
    def simple(self) -> bool:
        return self.convex and self.no_conjugate and not self.trapped

    def as_dict(self):
        return {"convex": self.convex, "no_conjugate": self.no_conjugate, "trapped": self.trapped,
                "min_second_fundamental_form": self.min_second_fundamental_form,
                "first_conjugate_time": self.first_conjugate_time}


def check_simple(m: MetricField, resolution: int = 32, radius: float = 1.0,
                 step: float = 5e-3) -> SimplicityReport:
    """Sampled diagnostic for simplicity of the disk of the given radius.

    A fan of ``resolution`` boundary points times ``resolution`` entry angles
    is launched; along each geodesic the normal Jacobi field with J(0)=0 is
    followed as the scalar equation b'' + K b = 0 and any return of b to
    zero before exit flags a conjugate point.
    """
    chart = BoundaryChart(m, radius)
    s = np.arange(resolution) * chart.length / resolution
    B = chart.second_fundamental_form(s)
    convex = bool(np.all(B > 0))

    th = np.repeat(chart.theta(s), resolution)
    phi = np.tile(-np.pi / 2 + (np.arange(resolution) + 0.5) * np.pi / resolution, resolution)
    S0 = _boundary_start_radius(m, th, phi, radius)
    S0 = np.concatenate([S0, np.zeros((S0.shape[0], 1)), np.ones((S0.shape[0], 1))], 1)

    def extra(S):
        K = m.gauss_curvature(S[:, 0], S[:, 1])
        return np.stack([S[:, 5], -K * S[:, 4]], -1)

    first = np.full(S0.shape[0], np.inf)

    def monitor(idx, rows, t):
        hit = (rows[:, 4] <= 0) & ~np.isfinite(first[idx])
        first[idx[hit]] = t[hit]

    res = integrate_batch(m, S0, FlowOptions(step=step, radius=radius), extra=extra, on_step=monitor)
    ex = res.exited
    # the final (partial) step can also cross zero
    last = ex & (res.state[:, 4] <= 0) & ~np.isfinite(first)
    first[last] = res.tau[last]
    return SimplicityReport(
        convex=convex,
        no_conjugate=bool(np.all(~np.isfinite(first))),
        trapped=bool(np.any(res.status == MAX_STEPS)),
        min_second_fundamental_form=float(B.min()),
        first_conjugate_time=float(first.min()),
    )


def _boundary_start_radius(m, theta, phi, radius):
    x, y = radius * np.cos(theta), radius * np.sin(theta)
    sig = m.speed(x, y, -y, x)
    T = np.stack([-y / sig, x / sig], -1)
    nu = m.rotate_ccw(x, y, T)
    beta = m.frame_angle(x, y, nu[..., 0], nu[..., 1]) + phi
    vx, vy = m.unit_vector(x, y, beta)
    return np.stack([x, y, vx, vy], -1)
