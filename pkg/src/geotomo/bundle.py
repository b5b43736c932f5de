"""Boundary fiber grids, the scattering relation and the continuation operators.

Charts.  A boundary point is addressed by g-arclength ``s``.  Inward unit
vectors are addressed by their signed angle ``phi`` from the inner normal
nu, ``xi = cos(phi) nu + sin(phi) R nu`` with R the counterclockwise quarter
turn.  Outward vectors use the reversed normal, ``eta = cos(p) (-nu) +
sin(p) R nu``, so both halves of the boundary sphere bundle are rectangles
``[0, L) x (-pi/2, pi/2)``.  The angle from nu on the full fiber circle is
``vartheta = pi - p`` for outward vectors.

The inward grid uses midpoints ``phi_j = -pi/2 + (j + 1/2) pi / N_phi``.  The
full grid has ``2 N_phi`` midpoints in vartheta and contains the inward
grid in its middle; its outward nodes are mirror images of inward nodes,
so on grids the scattering relation of an outward node is read straight
off the table.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RectBivariateSpline

from .flow import FlowOptions, _boundary_start_radius, integrate_batch
from .geometry import BoundaryChart, MetricField, wrap_angle

BAND = 0.05  # tangential band |cos phi| < BAND is masked in operator quadratures
PAD = 4


# ------------------------------------------------------------------ grid helpers


def inward_phi(nphi: int) -> np.ndarray:
    return -np.pi / 2 + (np.arange(nphi) + 0.5) * np.pi / nphi


def full_theta(nphi: int) -> np.ndarray:
    return -np.pi + (np.arange(2 * nphi) + 0.5) * np.pi / nphi


def outward_to_full(p):
    """vartheta of an outward vector with reversed-normal angle p."""
    return wrap_angle(np.pi - np.asarray(p, float))


def full_to_outward(vt):
    return wrap_angle(np.pi - np.asarray(vt, float))


def _outward_index(nphi: int) -> np.ndarray:
    """For each full-grid node j, the inward-grid index k with phi_k = p(vartheta_j); -1 on inward nodes."""
    j = np.arange(2 * nphi)
    k = np.full(2 * nphi, -1)
    lo = j < nphi // 2
    hi = j >= 3 * nphi // 2
    k[lo] = nphi // 2 - 1 - j[lo]
    k[hi] = 5 * nphi // 2 - 1 - j[hi]
    return k


class HalfInterpolator:
    """Bicubic spline of a (N_s, N_phi) array, periodic in s, over phi in [-pi/2, pi/2].

    Values outside the last phi nodes are extrapolated by the end pieces
    (the band there is masked in quadratures anyway).  Queries outside
    [-pi/2, pi/2] are clamped and counted in ``clamped``.
    """

    def __init__(self, s: np.ndarray, phi: np.ndarray, values: np.ndarray, length: float,
                 phi_ends=None):
        self.length = length
        ns = s.size
        idx = np.arange(-PAD, ns + PAD)
        s_ext = idx * (length / ns) + s[0]
        v_ext = values[np.mod(idx, ns)]
        if phi_ends is not None:
            lo, hi = phi_ends
            phi = np.concatenate([[-np.pi / 2], phi, [np.pi / 2]])
            v_ext = np.concatenate([lo[np.mod(idx, ns)][:, None], v_ext, hi[np.mod(idx, ns)][:, None]], 1)
        self.s0 = s[0]
        self._spl = RectBivariateSpline(s_ext, phi, v_ext, kx=3, ky=3,
                                        bbox=[s_ext[0], s_ext[-1], -np.pi / 2, np.pi / 2])
        self.clamped = 0

    def __call__(self, s, phi):
        s = np.asarray(s, float)
        phi = np.asarray(phi, float)
        s = np.broadcast_to(s, np.broadcast(s, phi).shape)
        phi = np.broadcast_to(phi, s.shape)
        sm = self.s0 + np.mod(s - self.s0, self.length)
        out = (phi < -np.pi / 2) | (phi > np.pi / 2)
        if np.any(out):
            self.clamped += int(out.sum())
            phi = np.clip(phi, -np.pi / 2, np.pi / 2)
        return self._spl.ev(sm.ravel(), phi.ravel()).reshape(s.shape)


@dataclass
class BoundaryFiberGrid:
    """Samples of a function on the boundary sphere bundle.

    ``half='inward'``: values of shape (N_s, N_phi) at (s_i, phi_j).
    ``half='full'``: values of shape (N_s, 2 N_phi) at (s_i, vartheta_j).
    """

    chart: BoundaryChart
    values: np.ndarray
    half: str = "inward"

    def __post_init__(self):
        self.values = np.asarray(self.values, float)
        if self.half not in ("inward", "full"):
            raise ValueError("half must be 'inward' or 'full'")
        if self.half == "full" and self.values.shape[1] % 4:
            raise ValueError("full grids need 2*N_phi nodes with N_phi even")

    @property
    def ns(self) -> int:
        return self.values.shape[0]

    @property
    def nphi(self) -> int:
        n = self.values.shape[1]
        return n if self.half == "inward" else n // 2

    @property
    def s(self) -> np.ndarray:
        return np.arange(self.ns) * self.chart.length / self.ns

    @property
    def angles(self) -> np.ndarray:
        return inward_phi(self.nphi) if self.half == "inward" else full_theta(self.nphi)

    @property
    def ds(self) -> float:
        return self.chart.length / self.ns

    @property
    def dphi(self) -> float:
        return np.pi / self.nphi

    @classmethod
    def from_function(cls, chart: BoundaryChart, ns: int, nphi: int, fn, half: str = "inward"):
        s = np.arange(ns) * chart.length / ns
        a = inward_phi(nphi) if half == "inward" else full_theta(nphi)
        S, A = np.meshgrid(s, a, indexing="ij")
        return cls(chart, np.asarray(fn(S, A), float) * np.ones(S.shape), half)

    def like(self, values, half=None) -> "BoundaryFiberGrid":
        return BoundaryFiberGrid(self.chart, values, half or self.half)

    # halves of a full grid ------------------------------------------------
    def inward_part(self) -> np.ndarray:
        if self.half == "inward":
            return self.values
        n = self.nphi
        return self.values[:, n // 2: n // 2 + n]

    def outward_part(self) -> np.ndarray:
        """Outward values rearranged on the (s, p) inward-shaped grid."""
        if self.half != "full":
            raise ValueError("outward_part needs a full grid")
        n = self.nphi
        k = _outward_index(n)
        out = np.empty((self.ns, n))
        sel = k >= 0
        out[:, k[sel]] = self.values[:, sel]
        return out

    @classmethod
    def assemble(cls, chart, inward: np.ndarray, outward: np.ndarray) -> "BoundaryFiberGrid":
        n = inward.shape[1]
        full = np.empty((inward.shape[0], 2 * n))
        full[:, n // 2: n // 2 + n] = inward
        k = _outward_index(n)
        sel = k >= 0
        full[:, sel] = outward[:, k[sel]]
        return cls(chart, full, "full")

    # interpolation ------------------------------------------------------
    def interpolator(self, part: str = "inward") -> HalfInterpolator:
        vals = self.inward_part() if part == "inward" else self.outward_part()
        return HalfInterpolator(self.s, inward_phi(self.nphi), vals, self.chart.length)

    # measures -----------------------------------------------------------
    def weights(self, mask: bool = True) -> np.ndarray:
        """|mu| dSigma weights: |cos phi| ds dphi, with the tangential band zeroed if ``mask``."""
        c = np.abs(np.cos(self.angles))
        if mask:
            c = np.where(c < BAND, 0.0, c)
        return np.broadcast_to(c[None, :] * self.ds * self.dphi, self.values.shape)

    def integral(self, mask: bool = True) -> float:
        return float((self.values * self.weights(mask)).sum())

    def band_contribution(self) -> float:
        return float((self.values * (self.weights(False) - self.weights(True))).sum())

    def inner(self, other: "BoundaryFiberGrid", mask: bool = True) -> float:
        return float((self.values * other.values * self.weights(mask)).sum())


# ------------------------------------------------------------------ scattering relation


@dataclass
class ScatterTable:
    """Exit data of every inward node: (s_exit, p_exit, tau) with p the reversed-normal angle."""

    metric: MetricField
    chart: BoundaryChart
    s: np.ndarray
    phi: np.ndarray
    s_exit: np.ndarray
    p_exit: np.ndarray
    tau: np.ndarray
    step: float = 1e-3
    _interp: dict = field(default_factory=dict, repr=False)

    @property
    def ns(self) -> int:
        return self.s.size

    @property
    def nphi(self) -> int:
        return self.phi.size

    @property
    def length(self) -> float:
        return self.chart.length

    def offset(self) -> np.ndarray:
        """s_exit - s unwrapped into [0, L): increasing in phi from 0 to L."""
        return np.mod(self.s_exit - self.s[:, None], self.length)

    def _spline(self, name):
        if name not in self._interp:
            zero = np.zeros(self.ns)
            if name == "offset":
                data, ends = self.offset(), (zero, zero + self.length)
            elif name == "p":
                data, ends = self.p_exit, (zero - np.pi / 2, zero + np.pi / 2)
            else:
                data, ends = self.tau, (zero, zero)
            self._interp[name] = HalfInterpolator(self.s, self.phi, data, self.length, phi_ends=ends)
        return self._interp[name]

    def exit(self, s, phi):
        """Interpolated (s_exit, p_exit, tau) of inward (s, phi)."""
        s = np.asarray(s, float)
        off = self._spline("offset")(s, phi)
        return (np.mod(s + off, self.length), self._spline("p")(s, phi), self._spline("tau")(s, phi))

    # alpha in the two charts -------------------------------------------
    def alpha_inward(self, s, phi):
        """alpha of an inward vector: the exit (s', p') in the outward chart."""
        se, pe, _ = self.exit(s, phi)
        return se, pe

    def alpha_outward(self, s, p):
        """alpha of an outward vector (s, p): the inward vector whose geodesic ends there."""
        se, pe, _ = self.exit(s, -np.asarray(p, float))
        return se, -pe

    def alpha_full(self, s, vt):
        """alpha on the full circle chart (s, vartheta)."""
        s = np.asarray(s, float)
        vt = wrap_angle(np.asarray(vt, float))
        s, vt = np.broadcast_arrays(s, vt)
        inward = np.abs(vt) < np.pi / 2
        s_out = np.empty(s.shape)
        v_out = np.empty(s.shape)
        if np.any(inward):
            a, b = self.alpha_inward(s[inward], vt[inward])
            s_out[inward], v_out[inward] = a, outward_to_full(b)
        if np.any(~inward):
            a, b = self.alpha_outward(s[~inward], full_to_outward(vt[~inward]))
            s_out[~inward], v_out[~inward] = a, b
        return s_out, v_out

    def alpha_nodes(self):
        """alpha of every full-grid node, read straight off the table (no interpolation)."""
        n = self.nphi
        S = np.empty((self.ns, 2 * n))
        V = np.empty((self.ns, 2 * n))
        S[:, n // 2: n // 2 + n] = self.s_exit
        V[:, n // 2: n // 2 + n] = outward_to_full(self.p_exit)
        k = _outward_index(n)
        sel = np.flatnonzero(k >= 0)
        # outward node p_k maps to inward (T_s(s, -p_k), -T_p(s, -p_k)); -p_k is node n-1-k
        mirror = n - 1 - k[sel]
        S[:, sel] = self.s_exit[:, mirror]
        V[:, sel] = -self.p_exit[:, mirror]
        return S, V

    def involution_error(self) -> float:
        """Largest node error of alpha(alpha(node)) against the node (inward nodes)."""
        S, P = np.meshgrid(self.s, self.phi, indexing="ij")
        s1, p1 = self.s_exit, self.p_exit
        s2, phi2 = self.alpha_outward(s1, p1)
        ds = wrap_angle((s2 - S) * 2 * np.pi / self.length) * self.length / (2 * np.pi)
        return float(max(np.abs(ds).max(), np.abs(phi2 - P).max()))

    def records(self):
        S, P = np.meshgrid(self.s, self.phi, indexing="ij")
        return [{"s": float(a), "phi": float(b), "s_exit": float(c), "phi_exit": float(d), "tau": float(e)}
                for a, b, c, d, e in zip(S.ravel(), P.ravel(), self.s_exit.ravel(),
                                         self.p_exit.ravel(), self.tau.ravel())]


def exit_chart(chart: BoundaryChart, state: np.ndarray):
    """(s, p) of exit rows of an integration, p measured from the reversed normal."""
    th = np.arctan2(state[:, 1], state[:, 0])
    vt = chart.angle_from_normal(th, state[:, 2:4])
    return np.mod(chart.s_of_theta(th), chart.length), full_to_outward(vt)


def scattering_relation(m: MetricField, ns: int, nphi: int, step: float = 1e-3,
                        radius: float = 1.0) -> ScatterTable:
    chart = BoundaryChart(m, radius)
    s = np.arange(ns) * chart.length / ns
    phi = inward_phi(nphi)
    S, P = np.meshgrid(s, phi, indexing="ij")
    S0 = _boundary_start_radius(m, chart.theta(S.ravel()), P.ravel(), radius)
    res = integrate_batch(m, S0, FlowOptions(step=step, radius=radius))
    if not np.all(res.exited):
        raise RuntimeError("some boundary geodesics did not exit: the disk is not simple")
    se, pe = exit_chart(chart, res.state)
    return ScatterTable(m, chart, s, phi, se.reshape(ns, nphi), pe.reshape(ns, nphi),
                        res.tau.reshape(ns, nphi), step)


# ------------------------------------------------------------------ continuation operators


def _check_grid(table: ScatterTable, u: BoundaryFiberGrid):
    if u.ns != table.ns or u.nphi != table.nphi:
        raise ValueError("grid does not match the scattering table")


def pullback_alpha(table: ScatterTable, u: BoundaryFiberGrid) -> BoundaryFiberGrid:
    """(alpha* u)(node) = u(alpha(node)) on the full grid."""
    _check_grid(table, u)
    if u.half != "full":
        raise ValueError("pullback_alpha acts on full-circle grids")
    inner_i = u.interpolator("inward")
    outer_i = u.interpolator("outward")
    # inward nodes land on the outward half, outward nodes on the inward half
    new_in = outer_i(table.s_exit, table.p_exit)
    se, pe = table.s_exit[:, ::-1], table.p_exit[:, ::-1]   # exit data of -p_k
    new_out = inner_i(se, -pe)
    return BoundaryFiberGrid.assemble(u.chart, new_in, new_out)


def a_plus(table: ScatterTable, w: BoundaryFiberGrid) -> BoundaryFiberGrid:
    return _a_sign(table, w, +1)


def a_minus(table: ScatterTable, w: BoundaryFiberGrid) -> BoundaryFiberGrid:
    return _a_sign(table, w, -1)


def _a_sign(table, w, sign):
    _check_grid(table, w)
    if w.half != "inward":
        raise ValueError("A+/A- act on inward grids")
    interp = w.interpolator("inward")
    se, pe = table.s_exit[:, ::-1], table.p_exit[:, ::-1]
    outward = sign * interp(se, -pe)
    return BoundaryFiberGrid.assemble(w.chart, w.values, outward)


def a_star(table: ScatterTable, u: BoundaryFiberGrid, sign: int = +1) -> BoundaryFiberGrid:
    """A_{+-}^* u = (u +- u o alpha) restricted to the inward half."""
    _check_grid(table, u)
    if u.half != "full":
        raise ValueError("a_star acts on full-circle grids")
    ua = u.interpolator("outward")(table.s_exit, table.p_exit)
    return BoundaryFiberGrid(u.chart, u.inward_part() + sign * ua, "inward")


def odd_under_alpha(table: ScatterTable, f: BoundaryFiberGrid) -> BoundaryFiberGrid:
    """f - f o alpha on the full grid (a function with A_+^* of it equal to zero)."""
    return f.like(f.values - pullback_alpha(table, f).values)


# ------------------------------------------------------------------ transport along orbits


def backtrace(m: MetricField, x, y, beta, step: float = 1e-3, radius: float = 1.0):
    """Follow (x, -xi(beta)) to the boundary: exit angle, exit velocity and tau(x, -xi)."""
    x = np.asarray(x, float).ravel()
    y = np.asarray(y, float).ravel()
    beta = np.asarray(beta, float).ravel()
    vx, vy = m.unit_vector(x, y, beta)
    S0 = np.stack([x, y, -vx, -vy], -1)
    res = integrate_batch(m, S0, FlowOptions(step=step, radius=radius))
    if not np.all(res.exited):
        raise RuntimeError("backward geodesic did not reach the boundary")
    th = np.arctan2(res.state[:, 1], res.state[:, 0])
    return th, res.state[:, 2:4], res.tau


def transport_extend(w: BoundaryFiberGrid, x, y, beta, step: float = 1e-3) -> np.ndarray:
    """w_psi at the phase points (x, y, beta): w at the entry point of the orbit through them.

    The result is constant along geodesics and agrees with w on the inward boundary.
    """
    if w.half != "inward":
        raise ValueError("transport_extend needs inward boundary data")
    chart = w.chart
    shape = np.broadcast(np.asarray(x), np.asarray(y), np.asarray(beta)).shape
    X, Y, B = (np.broadcast_to(np.asarray(a, float), shape) for a in (x, y, beta))
    th, v, _ = backtrace(chart.metric, X, Y, B, step, chart.radius)
    phi = chart.angle_from_normal(th, -v)
    s = np.mod(chart.s_of_theta(th), chart.length)
    return w.interpolator("inward")(s, phi).reshape(shape)


# ------------------------------------------------------------------ fold diagnostic


@dataclass
class FoldReport:
    s: np.ndarray
    vartheta: np.ndarray
    singular_values: np.ndarray   # (n, 2), descending
    jacobians: np.ndarray         # (n, 2, 2)


def fold_map(m: MetricField, s, vartheta, delta: float = 0.2, step: float = 1e-3,
             chart_m: BoundaryChart | None = None, chart_n: BoundaryChart | None = None):
    """phi(x, xi) = flow of (x, xi) in dM x fiber to the exit from the disk of radius 1 + delta.

    Input chart: arclength s on dM and the full-circle angle vartheta from nu.
    Output chart: arclength on dN and the reversed-normal angle p of the exit vector.
    """
    chart_m = chart_m or BoundaryChart(m, 1.0)
    chart_n = chart_n or BoundaryChart(m, 1.0 + delta)
    s = np.asarray(s, float).ravel()
    vt = np.asarray(vartheta, float).ravel()
    p, nu, _, _ = chart_m(s)
    x, y = p[:, 0], p[:, 1]
    beta = m.frame_angle(x, y, nu[:, 0], nu[:, 1]) + vt
    vx, vy = m.unit_vector(x, y, beta)
    S0 = np.stack([x, y, vx, vy], -1)
    res = integrate_batch(m, S0, FlowOptions(step=step, radius=1.0 + delta))
    if not np.all(res.exited):
        raise RuntimeError("a geodesic did not exit the enlarged disk")
    se, pe = exit_chart(chart_n, res.state)
    return se, pe, chart_n.length


def fold_diagnostic(m: MetricField, s, vartheta, delta: float = 0.2, h: float = 1e-4,
                    step: float = 1e-3) -> FoldReport:
    """Central-difference Jacobian of the fold map at the given (s, vartheta) and its singular values."""
    s = np.atleast_1d(np.asarray(s, float))
    vt = np.atleast_1d(np.asarray(vartheta, float))
    s, vt = np.broadcast_arrays(s, vt)
    cm, cn = BoundaryChart(m, 1.0), BoundaryChart(m, 1.0 + delta)
    n = s.size
    ds = np.array([h, -h, 0, 0])
    dv = np.array([0, 0, h, -h])
    S = (s.ravel()[:, None] + ds[None, :]).ravel()
    V = (vt.ravel()[:, None] + dv[None, :]).ravel()
    se, pe, LN = fold_map(m, S, V, delta, step, cm, cn)
    se = se.reshape(n, 4)
    pe = pe.reshape(n, 4)

    def dwrap(a, b):  # difference of arclengths on a circle of length LN
        return wrap_angle((a - b) * 2 * np.pi / LN) * LN / (2 * np.pi)

    J = np.empty((n, 2, 2))
    J[:, 0, 0] = dwrap(se[:, 0], se[:, 1]) / (2 * h)
    J[:, 1, 0] = (pe[:, 0] - pe[:, 1]) / (2 * h)
    J[:, 0, 1] = dwrap(se[:, 2], se[:, 3]) / (2 * h)
    J[:, 1, 1] = (pe[:, 2] - pe[:, 3]) / (2 * h)
    sv = np.linalg.svd(J, compute_uv=False)
    return FoldReport(s.ravel(), vt.ravel(), sv, J)


def euclidean_fold_jacobian(vartheta, delta: float = 0.2) -> np.ndarray:
    """Closed-form Jacobian of the fold map on the Euclidean unit disk.

    The exit angle is theta + vartheta + pi + atan2(sin vartheta, Q) and the exit
    fiber angle atan2(sin vartheta, Q), Q = sqrt(cos^2 vartheta + rho^2 - 1).
    """
    vt = np.asarray(vartheta, float)
    rho = 1.0 + delta
    Q = np.sqrt(np.cos(vt) ** 2 + rho**2 - 1)
    a = np.cos(vt) / Q
    J = np.zeros(vt.shape + (2, 2))
    J[..., 0, 0] = rho
    J[..., 0, 1] = rho * (1 + a)
    J[..., 1, 1] = a
    return J


@dataclass
class FoldScan:
    eps: np.ndarray            # distance pi/2 - |phi| to the glancing set
    sigma_min: np.ndarray
    sigma_max: np.ndarray
    slope: float
    intercept: float
    r_squared: float


def fold_scan(m: MetricField, s: float, side: int = 1, eps=None, delta: float = 0.2,
              step: float = 1e-3) -> FoldScan:
    """Approach the glancing direction at s along inward directions and regress sigma_min on eps."""
    eps = np.linspace(0.005, 0.1, 12) if eps is None else np.asarray(eps, float)
    rep = fold_diagnostic(m, np.full(eps.shape, float(s)), side * (np.pi / 2 - eps), delta, step=step)
    y = rep.singular_values[:, 1]
    slope, icpt = np.polyfit(eps, y, 1)
    resid = y - (slope * eps + icpt)
    r2 = 1.0 - float((resid**2).sum() / ((y - y.mean()) ** 2).sum())
    return FoldScan(eps, y, rep.singular_values[:, 0], float(slope), float(icpt), r2)
