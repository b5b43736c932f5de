"""Dirichlet-to-Neumann maps on the disk, computed three ways.

* ``dn_analytic_disk``: the Euclidean disk, where Lambda multiplies the
  k-th Fourier mode by |k|.
* ``dn_pde``: a direct boundary value solve.  Conformal metrics reduce to
  the Euclidean problem (harmonic functions do not see the conformal
  factor, only the unit normal does); other metrics go through a
  conservative finite-volume Laplace-Beltrami solve in polar coordinates.
* ``extract_dn``: from the scattering relation alone, by solving the
  boundary equation 2 pi A_-^* H_+ A_+ w = -A_-^* h_*^0 for w and reading
  off the trace h^0 = 2 pi (A_+ w)_0 of the conjugate function.

Orientation: traces are sampled in g-arclength s, increasing
counter-clockwise, and Lambda uses the outer normal, so that
Lambda(cos k theta) = k cos k theta on the Euclidean disk.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import CubicSpline
from scipy.sparse.linalg import splu

from numpy.polynomial import legendre
from numpy.polynomial import polynomial as npoly

from math import comb

from .bundle import BoundaryFiberGrid, ScatterTable, a_plus, a_star, scattering_relation
from .flow import FlowOptions, ShootingError, _boundary_start, integrate_batch, shoot
from .expr import Jet2
from .geometry import BoundaryChart, MetricField
from .hilbert import hilbert_values
from .transport import PolarGrid, ScalarField

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ traces


@dataclass
class BoundaryTrace:
    """Samples of a function on the boundary circle at N_s uniform arclength nodes."""

    chart: BoundaryChart
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, float).copy()
        if self.values.ndim != 1:
            raise ValueError("a trace is one-dimensional")

    @classmethod
    def from_function(cls, chart: BoundaryChart, ns: int, fn: Callable) -> "BoundaryTrace":
        """Sample ``fn(theta)`` at the arclength nodes."""
        s = np.arange(ns) * chart.length / ns
        return cls(chart, np.broadcast_to(fn(chart.theta(s)), (ns,)))

    def like(self, values) -> "BoundaryTrace":
        return BoundaryTrace(self.chart, values)

    @property
    def ns(self) -> int:
        return self.values.size

    @property
    def ds(self) -> float:
        return self.chart.length / self.ns

    @property
    def s(self) -> np.ndarray:
        return np.arange(self.ns) * self.ds

    @property
    def theta(self) -> np.ndarray:
        return self.chart.theta(self.s)

    @cached_property
    def fourier(self) -> np.ndarray:
        return np.fft.rfft(self.values)

    def mean(self) -> float:
        return float(self.values.mean())

    def mean_zero(self) -> "BoundaryTrace":
        return self.like(self.values - self.values.mean())

    def derivative(self) -> "BoundaryTrace":
        """Spectral d/ds; the Nyquist mode of an even count is dropped."""
        k = np.fft.rfftfreq(self.ns, self.ds / (2 * np.pi))
        c = 1j * k * self.fourier
        if self.ns % 2 == 0:
            c[-1] = 0
        return self.like(np.fft.irfft(c, self.ns))

    def l2(self) -> float:
        return float(np.sqrt(np.sum(self.values**2) * self.ds))

    def inner(self, other: "BoundaryTrace") -> float:
        return float(np.dot(self.values, other.values) * self.ds)

    def __call__(self, s) -> np.ndarray:
        """Trigonometric interpolant at arclength ``s`` (exact on resolved modes)."""
        s = np.asarray(s, float)
        n = self.ns
        c = self.fourier / n
        x = 2 * np.pi * s / self.chart.length
        out = np.full(s.shape, c[0].real)
        top = (n - 1) // 2
        for k in range(1, top + 1):
            out += 2 * (c[k] * np.exp(1j * k * x)).real
        if n % 2 == 0:
            out += (c[-1] * np.exp(1j * (n // 2) * x)).real
        return out

    def at_theta(self, theta) -> np.ndarray:
        """Periodic spline value at coordinate angles ``theta``."""
        L = self.chart.length
        spl = CubicSpline(np.append(self.s, L), np.append(self.values, self.values[0]),
                          bc_type="periodic")
        return spl(np.mod(self.chart.s_of_theta(np.asarray(theta, float)), L))


def _from_theta_samples(chart: BoundaryChart, theta: np.ndarray, vals: np.ndarray, ns: int):
    """Resample periodic data given at uniform coordinate angles onto the s-grid."""
    spl = CubicSpline(np.append(theta, 2 * np.pi), np.append(vals, vals[:1], axis=0),
                      bc_type="periodic")
    s = np.arange(ns) * chart.length / ns
    return spl(np.mod(chart.theta(s), 2 * np.pi))


@dataclass
class DnOperator:
    """Discrete Lambda as a dense N_s x N_s matrix acting on trace values."""

    chart: BoundaryChart
    matrix: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def ns(self) -> int:
        return self.matrix.shape[0]

    def __call__(self, f: BoundaryTrace) -> BoundaryTrace:
        return f.like(self.matrix @ f.values)

    def constant_leak(self) -> float:
        """Size of Lambda(1) relative to the operator norm."""
        return float(np.abs(self.matrix.sum(1)).max() / np.linalg.norm(self.matrix, 2))

    def asymmetry(self) -> float:
        """Relative antisymmetric part; the arclength weights are uniform, so this is the
        self-adjointness defect in L^2(ds)."""
        M = self.matrix
        return float(np.linalg.norm(M - M.T, 2) / np.linalg.norm(M, 2))


def dn_analytic_disk(k: int, ns: int = 64):
    """Images of cos(k theta) and sin(k theta) under the Euclidean disk map."""
    chart = BoundaryChart(MetricField.euclidean())
    c = BoundaryTrace.from_function(chart, ns, lambda th: k * np.cos(k * th))
    s = BoundaryTrace.from_function(chart, ns, lambda th: k * np.sin(k * th))
    return c, s


def euclidean_dn_matrix(ns: int) -> np.ndarray:
    """The |k| Fourier multiplier on N_s uniform samples (Nyquist mode kept real)."""
    I = np.eye(ns)
    k = np.arange(ns // 2 + 1)
    return np.fft.irfft(k[:, None] * np.fft.rfft(I, axis=0), ns, axis=0)


def harmonic_extension(f: BoundaryTrace, nmodes: int | None = None) -> Callable:
    """Euclidean harmonic extension of a trace, evaluated by its Fourier series.

    The coefficients are taken in the coordinate angle; for a non-uniform
    chart the trace is first resampled to uniform theta.
    """
    n = nmodes or max(f.ns, 16)
    theta = np.arange(n) * 2 * np.pi / n
    vals = f.values if (f.chart.uniform and n == f.ns) else f.at_theta(theta)
    c = np.fft.rfft(vals) / n
    c[1:] *= 2
    if n % 2 == 0:
        c[-1] /= 2
    k = np.arange(c.size)

    def u(x, y):
        z = np.asarray(x, float) + 1j * np.asarray(y, float)
        out = np.zeros(z.shape, complex) + c[0]
        zk = np.ones_like(z)
        for kk in k[1:]:
            zk = zk * z
            out = out + c[kk] * zk
        return out.real
    return u


def radial_pullback(a: float = 0.2) -> MetricField:
    """The Euclidean metric pulled back by psi(x) = x (1 + a (1 - |x|^2)^2).

    psi fixes the circle and its differential there is the identity, so the
    DN map of this metric equals the Euclidean one.  |a| < 1/2 keeps psi a
    diffeomorphism of the closed disk.
    """
    R2 = "(x^2+y^2)"
    F = f"(1+{a!r}*(1-{R2})^2)"
    Fp = f"(-{2 * a!r}*(1-{R2}))"       # dF/d(r^2)
    c = f"(4*{Fp}*({F}+{Fp}*{R2}))"
    return MetricField.general(f"{F}^2+{c}*x^2", f"{c}*x*y", f"{F}^2+{c}*y^2")


# ------------------------------------------------------------------ PDE route


@dataclass(frozen=True)
class PdeConfig:
    method: str = "auto"          # "auto": conformal invariance when possible, else "fd"
    nr: int = 48                  # radial cells of the coarse finite-volume grid
    ntheta: int = 256             # angular cells of the coarse grid (at least N_s)
    richardson: bool = True       # combine nr and 2 nr solves


def _polar_tensor(m: MetricField, r, th):
    """A = sqrt(det G) G^{-1} and G^{-1} for the metric in (r, theta) coordinates."""
    c, s = np.cos(th), np.sin(th)
    g11, g12, g22 = m.components(r * c, r * s)
    # columns of the Jacobian: d/dr = (c, s), d/dtheta = r (-s, c)
    Grr = g11 * c * c + 2 * g12 * c * s + g22 * s * s
    Grt = r * (-g11 * c * s + g12 * (c * c - s * s) + g22 * c * s)
    Gtt = r * r * (g11 * s * s - 2 * g12 * c * s + g22 * c * c)
    det = Grr * Gtt - Grt**2
    inv = (Gtt / det, -Grt / det, Grr / det)
    sd = np.sqrt(det)
    return tuple(sd * v for v in inv), inv


class _LaplaceSolver:
    """Cell-centred finite volumes for div(sqrt(g) g^{-1} grad u) = 0 on the unit disk.

    Cells sit at r_i = (i + 1/2) dr, theta_j = j dtheta.  The innermost
    radial neighbour of a cell is its mirror image through the origin.  The
    Dirichlet face uses the quadratic one-sided difference through the
    boundary value and the two outer cells, and so does the normal
    derivative read-out.
    """

    def __init__(self, m: MetricField, nr: int, ntheta: int):
        if ntheta % 2:
            raise ValueError("ntheta must be even")
        self.m, self.nr, self.nt = m, nr, ntheta
        dr, dt = 1.0 / nr, 2 * np.pi / ntheta
        self.dr, self.dt = dr, dt
        self.theta = np.arange(ntheta) * dt
        n = nr * ntheta
        idx = np.arange(n).reshape(nr, ntheta)
        rows, cols, vals = [], [], []
        # boundary coupling: (row, theta index, weight) for f_j
        brow, bcol, bval = [], [], []

        def add(r_, c_, v_):
            rows.append(r_.ravel()), cols.append(c_.ravel()), vals.append(np.broadcast_to(v_, r_.shape).ravel())

        def addb(r_, j_, v_):
            brow.append(r_.ravel()), bcol.append(j_.ravel()), bval.append(np.broadcast_to(v_, r_.shape).ravel())

        J = np.arange(ntheta)
        jp, jm = np.roll(J, -1), np.roll(J, 1)
        mirror = np.roll(J, ntheta // 2)

        # r-faces r_{i+1/2}, i = 0..nr-2 (interior faces)
        for i in range(nr - 1):
            rf = (i + 1) * dr
            (Arr, Art, _), _ = _polar_tensor(m, rf, self.theta)
            a, b = idx[i], idx[i + 1]
            # flux F = Arr u_r + Art u_theta leaving cell i through the face, times dtheta
            urr = Arr * dt / dr
            add(a, a, -urr), add(a, b, urr), add(b, b, -urr), add(b, a, urr)
            ct = Art * dt / (4 * dt)
            for cell, sgn in ((a, 1.0), (b, -1.0)):
                for src in (a, b):
                    add(cell, src[jp], sgn * ct), add(cell, src[jm], -sgn * ct)
        # boundary face r = 1 of cell nr-1
        (Arr, Art, _), _ = _polar_tensor(m, 1.0, self.theta)
        a, b = idx[nr - 1], idx[nr - 2]
        # u_r(1) = (8 f - 9 u_a + u_b) / (3 dr)
        w = Arr * dt / (3 * dr)
        add(a, a, -9 * w), add(a, b, w), addb(a, J, 8 * w)
        ct = Art * dt / (2 * dt)
        addb(a, jp, ct), addb(a, jm, -ct)
        # theta-faces (r_i, theta_{j+1/2})
        for i in range(nr):
            ri = (i + 0.5) * dr
            tf = self.theta + dt / 2
            (_, Atr, Att), _ = _polar_tensor(m, ri, tf)
            a, b = idx[i], idx[i][jp]
            utt = Att * dr / dt
            add(a, a, -utt), add(a, b, utt), add(b, b, -utt), add(b, a, utt)
            # u_r at the face: average of the central radial differences of both cells
            for cell, sgn in ((a, 1.0), (b, -1.0)):
                for jj in (J, jp):
                    if i == nr - 1:
                        # quadratic through f, u_i, u_{i-1}: u_r(r_i) = (4 f - 3 u_i - u_{i-1}) / (3 dr)
                        cr = Atr * dr / (2 * 3 * dr)
                        addb(cell, jj, 4 * sgn * cr)
                        add(cell, idx[i][jj], -3 * sgn * cr), add(cell, idx[i - 1][jj], -sgn * cr)
                    else:
                        cr = Atr * dr / (2 * 2 * dr)
                        lo = idx[i - 1][jj] if i > 0 else idx[0][mirror[jj]]
                        add(cell, idx[i + 1][jj], sgn * cr), add(cell, lo, -sgn * cr)
        A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), (n, n))
        self.B = sp.csr_matrix((np.concatenate(bval), (np.concatenate(brow), np.concatenate(bcol))),
                               (n, ntheta))
        self.lu = splu(A.tocsc())
        _, (irr, irt, _) = _polar_tensor(m, 1.0, self.theta)
        self._nrm = (irr / np.sqrt(irr), irt / np.sqrt(irr))

    def solve(self, f: np.ndarray) -> np.ndarray:
        """Interior cell values for boundary data f (shape (ntheta,) or (ntheta, k))."""
        rhs = -(self.B @ f)
        u = self.lu.solve(np.asarray(rhs, float))
        return u.reshape((self.nr, self.nt) + np.shape(f)[1:])

    def normal_derivative(self, f: np.ndarray) -> np.ndarray:
        u = self.solve(f)
        ur = (8 * f - 9 * u[-1] + u[-2]) / (3 * self.dr)
        ut = (np.roll(f, -1, 0) - np.roll(f, 1, 0)) / (2 * self.dt)
        a, b = self._nrm
        if np.ndim(f) == 2:
            a, b = a[:, None], b[:, None]
        return a * ur + b * ut


def _fd_dn(m: MetricField, f_theta: np.ndarray, cfg: PdeConfig) -> np.ndarray:
    """Outer normal derivative at uniform theta nodes of the g-harmonic extension."""
    nt = f_theta.shape[0]
    coarse = _LaplaceSolver(m, cfg.nr, nt).normal_derivative(f_theta)
    if not cfg.richardson:
        return coarse
    # the fine grid halves dr and dtheta; its even theta nodes are the coarse ones
    theta_f = np.arange(2 * nt) * np.pi / nt
    spl = CubicSpline(np.append(theta_f[::2], 2 * np.pi), np.append(f_theta, f_theta[:1], axis=0),
                      bc_type="periodic")
    fine = _LaplaceSolver(m, 2 * cfg.nr, 2 * nt).normal_derivative(spl(theta_f))[::2]
    return (4 * fine - coarse) / 3


def _trig_resample(vals: np.ndarray, n: int) -> np.ndarray:
    """Trigonometric interpolation of periodic samples onto n uniform nodes."""
    m = vals.shape[0]
    c = np.fft.rfft(vals, axis=0)
    if m % 2 == 0:
        c[-1] = c[-1] / 2 if n > m else c[-1]
    out = np.zeros((n // 2 + 1,) + vals.shape[1:], complex)
    k = min(c.shape[0], out.shape[0])
    out[:k] = c[:k]
    return np.fft.irfft(out, n, axis=0) * (n / m)


def _dn_values(m: MetricField, chart: BoundaryChart, values: np.ndarray, cfg: PdeConfig) -> np.ndarray:
    """Lambda on trace values of shape (N_s,) or (N_s, k): the columns share one factorisation."""
    method = cfg.method
    if method == "auto":
        method = "conformal" if m.kind == "conformal" else "fd"
    if method not in ("conformal", "fd"):
        raise ValueError(f"unknown method {cfg.method!r}")
    if method == "conformal" and m.kind != "conformal":
        raise ValueError("the conformal route needs a conformal metric")
    ns = values.shape[0]
    nt = ns + (ns % 2)
    if method == "fd":
        nt = max(nt, cfg.ntheta + cfg.ntheta % 2)
    theta = np.arange(nt) * 2 * np.pi / nt
    if chart.uniform:
        ft = _trig_resample(values, nt)
    else:
        L = chart.length
        s = np.arange(ns) * L / ns
        spl = CubicSpline(np.append(s, L), np.append(values, values[:1], axis=0), bc_type="periodic")
        ft = spl(np.mod(chart.s_of_theta(theta), L))
    if method == "conformal":
        scale = np.exp(-m.lam(np.cos(theta), np.sin(theta)))
        out = euclidean_dn_matrix(nt) @ ft
        out = out * (scale if out.ndim == 1 else scale[:, None])
    else:
        try:
            out = _fd_dn(m, ft, cfg)
        except RuntimeError as exc:              # singular factorisation
            raise np.linalg.LinAlgError(f"Laplace solve failed: {exc}") from exc
    if chart.uniform:
        return _trig_resample(out, ns)
    return _from_theta_samples(chart, theta, out, ns)


def dn_pde(m: MetricField, f: BoundaryTrace, cfg: PdeConfig = PdeConfig()) -> BoundaryTrace:
    """Lambda_g f by a direct boundary value solve."""
    return f.like(_dn_values(m, f.chart, f.values, cfg))


def dn_matrix_pde(m: MetricField, ns: int, cfg: PdeConfig = PdeConfig()) -> DnOperator:
    """Dense Lambda on N_s arclength samples (the PDE applied to every unit trace)."""
    chart = BoundaryChart(m)
    M = _dn_values(m, chart, np.eye(ns), cfg)
    return DnOperator(chart, M, {"route": "pde", "method": cfg.method, "nr": cfg.nr,
                                 "ntheta": cfg.ntheta, "richardson": cfg.richardson})


# ------------------------------------------------------------------ from the scattering relation


@dataclass(frozen=True)
class DnConfig:
    """Grids and regularisation for the boundary equation.

    w is sought in the span of Fourier modes |k| <= s_modes in s times
    Legendre polynomials of degree < phi_modes in 2 phi / pi: smooth
    inward data, as the equation is posed on C_alpha^infinity.
    """

    ns: int = 64
    nphi: int = 32
    step: float = 1e-3
    s_modes: int = 16
    phi_modes: int = 12
    cutoff: float = 1e-6          # relative singular value cutoff of the pseudo-inverse
    residual_tol: float = 1e-2    # relative residual above which a solve is reported ill-posed

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


class IllPosedError(RuntimeError):
    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution


@dataclass
class WSolution:
    w: BoundaryFiberGrid
    h0: BoundaryTrace
    coefficients: np.ndarray
    residual: float
    rank: int
    ok: bool


def _fiber_mean_pi(a: np.ndarray, ns: int, nphi: int) -> np.ndarray:
    return a.reshape(ns, nphi, -1).mean(1)


class WEquation:
    """The discrete operator L = 2 pi A_-^* H_+ A_+ on smooth inward data, ready to solve.

    On a simple disk the even continuation A_+ w, the even Hilbert
    transform and A_-^* only ever need inward values: the antipode of an
    inward direction at s is outward, and alpha of it is the time reversal
    Q(s, phi) = (s', -p') of the exit (s', p').  Hence

        L = pi (I - Q) H_pi (I + Q),    h^0 = pi mean_phi (I + Q) w,

    with H_pi the Hilbert transform of the pi-periodic fibre function
    obtained by repeating the inward samples.  (I + Q) is applied to the
    basis in closed form; (I - Q) needs a spline interpolation matrix.
    """

    def __init__(self, m: MetricField, cfg: DnConfig = DnConfig(), table: ScatterTable | None = None):
        self.metric, self.cfg = m, cfg
        self.table = table or scattering_relation(m, cfg.ns, cfg.nphi, cfg.step)
        T = self.table
        ns, nphi = T.ns, T.nphi
        S, P = np.meshgrid(T.s, T.phi, indexing="ij")
        self.B = self._basis(S.ravel(), P.ravel())
        sym = self.B + self._basis(T.s_exit.ravel(), -T.p_exit.ravel())
        Hs = self._h_pi(sym)
        self.L = np.pi * (Hs - self._q_matrix() @ Hs)
        self.H0 = np.pi * _fiber_mean_pi(sym, ns, nphi)
        self.U, self.sv, self.Vt = np.linalg.svd(self.L, full_matrices=False)
        self.keep = self.sv > cfg.cutoff * self.sv[0]
        log.info("boundary equation: %d basis functions, rank %d", self.nbasis, self.rank)

    @property
    def nbasis(self) -> int:
        return self.B.shape[1]

    @property
    def rank(self) -> int:
        return int(self.keep.sum())

    def _basis(self, s, phi) -> np.ndarray:
        x = 2 * np.pi * np.asarray(s) / self.table.length
        K = self.cfg.s_modes
        four = [np.ones_like(x)]
        for k in range(1, K + 1):
            four += [np.cos(k * x), np.sin(k * x)]
        F = np.stack(four, 1)
        P = legendre.legvander(2 * np.asarray(phi) / np.pi, self.cfg.phi_modes - 1)
        return np.einsum("qa,qb->qab", F, P).reshape(x.size, -1)

    def _h_pi(self, X: np.ndarray) -> np.ndarray:
        ns, nphi = self.table.ns, self.table.nphi
        V = X.reshape(ns, nphi, -1).transpose(0, 2, 1)
        H = hilbert_values(np.concatenate([V, V], -1))[..., :nphi]
        return H.transpose(0, 2, 1).reshape(ns * nphi, -1)

    def _q_matrix(self) -> np.ndarray:
        T = self.table
        ns, nphi, L = T.ns, T.nphi, T.length
        eye_s = np.eye(ns)
        As = CubicSpline(np.append(T.s, L), np.vstack([eye_s, eye_s[:1]]), bc_type="periodic")(
            np.mod(T.s_exit.ravel(), L))
        Ap = CubicSpline(T.phi, np.eye(nphi))(-T.p_exit.ravel())
        return np.einsum("qi,qj->qij", As, Ap).reshape(ns * nphi, ns * nphi)

    # ------------------------------------------------------------------
    def rhs(self, h_star: BoundaryTrace) -> np.ndarray:
        """-A_-^* h_*^0 on the inward nodes."""
        T = self.table
        return -(h_star(T.s)[:, None] - h_star(T.s_exit)).ravel()

    def apply(self, c: np.ndarray) -> np.ndarray:
        return self.L @ c

    def w_grid(self, c: np.ndarray) -> BoundaryFiberGrid:
        T = self.table
        return BoundaryFiberGrid(T.chart, (self.B @ c).reshape(T.ns, T.nphi), "inward")

    def solve(self, h_star: BoundaryTrace) -> WSolution:
        """Minimal-norm truncated-spectrum solution; never raises."""
        b = self.rhs(h_star)
        nb = np.linalg.norm(b)
        k = self.keep
        c = self.Vt[k].T @ ((self.U[:, k].T @ b) / self.sv[k])
        r = np.linalg.norm(self.L @ c - b)
        res = float(r / nb) if nb > 0 else float(r)
        h0 = BoundaryTrace(self.table.chart, self.H0 @ c)
        return WSolution(self.w_grid(c), h0, c, res, self.rank, res <= self.cfg.residual_tol)


def solve_w_equation(m: MetricField, h_star0: BoundaryTrace, cfg: DnConfig = DnConfig(),
                     system: WEquation | None = None) -> WSolution:
    """Solve 2 pi A_-^* H_+ A_+ w = -A_-^* h_*^0; raise IllPosedError on a large residual."""
    sol = (system or WEquation(m, cfg)).solve(h_star0)
    if not sol.ok:
        raise IllPosedError(f"relative residual {sol.residual:.2e} above tolerance", sol)
    return sol


def w_equation_operator(table: ScatterTable, w: BoundaryFiberGrid) -> np.ndarray:
    """2 pi A_-^* H_+ A_+ w matrix-free, through the bundle continuation operators."""
    full = a_plus(table, w)
    even = full.like(hilbert_values(full.values, "even"))
    return 2 * np.pi * a_star(table, even, -1).values


def w_equation_residual(table: ScatterTable, w: BoundaryFiberGrid, h_star: BoundaryTrace) -> float:
    """Relative residual of the boundary equation for given w and h_*^0."""
    lhs = w_equation_operator(table, w)
    hs = np.repeat(h_star(table.s)[:, None], 2 * table.nphi, 1)
    rhs = -a_star(table, BoundaryFiberGrid(table.chart, hs, "full"), -1).values
    return float(np.linalg.norm(lhs - rhs) / np.linalg.norm(rhs))


@dataclass
class DnExtraction:
    operator: DnOperator
    images: list
    solutions: list
    failures: list
    meta: dict


def extract_dn(m: MetricField, basis: list, cfg: DnConfig = DnConfig(),
               system: WEquation | None = None) -> DnExtraction:
    """Lambda on the span of ``basis`` from scattering data only.

    For each h_*^0 the conjugate trace h^0 comes out of the boundary
    equation, and Lambda h_*^0 = -d h^0 / ds (outer normal, counter-clockwise s).
    Columns whose solve is ill-posed are recorded in ``failures`` and left out.
    """
    system = system or WEquation(m, cfg)
    images, sols, failures = [], [], []
    for i, b in enumerate(basis):
        sol = system.solve(b)
        sols.append(sol)
        if not sol.ok:
            failures.append((i, f"relative residual {sol.residual:.2e}"))
            images.append(None)
            continue
        d = sol.h0.derivative()
        images.append(b.like(-d(b.s)).mean_zero())
    good = [i for i, im in enumerate(images) if im is not None]
    chart = basis[0].chart if basis else system.table.chart
    if good:
        Bm = np.stack([basis[i].values for i in good], 1)
        Y = np.stack([images[i].values for i in good], 1)
        M = Y @ np.linalg.pinv(Bm)
    else:
        M = np.zeros((chart and basis[0].ns if basis else system.cfg.ns,) * 2)
    meta = {"route": "scattering", "rank": system.rank, "nbasis": system.nbasis,
            "residuals": [s.residual for s in sols], **system.cfg.as_dict()}
    return DnExtraction(DnOperator(chart, M, meta), images, sols, failures, meta)


def subspace_error(images: list, reference: list, basis: list) -> float:
    """Spectral-norm error of an operator on span(basis), relative to the reference.

    Both operators are known through their images of the basis; the basis
    is orthonormalised in L^2(ds) first, so the result does not depend on
    how the spanning set is scaled.
    """
    Bm = np.stack([b.values for b in basis], 1)
    _, R = np.linalg.qr(Bm)
    Ri = np.linalg.inv(R)
    Y = np.stack([y.values for y in images], 1) @ Ri
    Z = np.stack([z.values for z in reference], 1) @ Ri
    return float(np.linalg.norm(Y - Z, 2) / np.linalg.norm(Z, 2))


# ------------------------------------------------------------------ conjugate harmonic pairs


def _gradient(f: Callable, x, y, d: float):
    return np.stack([(f(x + d, y) - f(x - d, y)) / (2 * d), (f(x, y + d) - f(x, y - d)) / (2 * d)], -1)


def conjugate_pair_check(m: MetricField, h: ScalarField, h_star: ScalarField, rmax: float = 0.9) -> float:
    """L^2(M) norm of grad h - (grad h_*)_perp over the nodes with |x| <= rmax.

    Gradients are central differences of the grid interpolants with the
    radial spacing as step.  Zero for a conjugate pair up to discretisation.
    """
    g = h.grid
    x, y = g.points()
    keep = np.hypot(x, y) <= rmax
    x, y = x[keep], y[keep]
    d = g.dr
    inv = np.linalg.inv(m.matrix(x, y))
    gh = np.einsum("nij,nj->ni", inv, _gradient(h, x, y, d))
    gs = np.einsum("nij,nj->ni", inv, _gradient(h_star, x, y, d))
    diff = gh - m.rotate_perp(x, y, gs)
    w = g.area_weights(m)[keep]
    return float(np.sqrt(np.sum(m.inner(x, y, diff, diff) * w)))


# ------------------------------------------------------------------ inverse kinematics (conformal)


def _poly_strings(mm: int):
    """Re z^m and Im z^m as expressions in x, y."""
    re, im = [], []
    for k in range(mm + 1):
        c = comb(mm, k)
        mono = "*".join(p for p in (f"x^{mm - k}" if mm - k else "", f"y^{k}" if k else "") if p) or "1"
        if k % 2 == 0:
            re.append(f"{c * (-1) ** (k // 2)}*{mono}")
        else:
            im.append(f"{c * (-1) ** ((k - 1) // 2)}*{mono}")
    return "+".join(re) or "0", "+".join(im) or "0"


class ConformalBasis:
    """lambda = sum_{j, a} c_{j a} |x|^{2 j} P_a(x) with P_a in 1, Re z, Im z, Re z^2, ...

    Every element is a polynomial, hence smooth at the centre.  Columns are
    ordered radial power major.
    """

    def __init__(self, radial: int = 6, angular: int = 8):
        self.radial, self.angular = radial, angular
        ang = [(0, "cos")]
        mm = 1
        while len(ang) < angular:
            ang += [(mm, "cos"), (mm, "sin")]
            mm += 1
        self.ang = ang[:angular]

    @property
    def size(self) -> int:
        return self.radial * self.angular

    def index(self, m: int, kind: str, j: int) -> int:
        return j * self.angular + self.ang.index((m, kind))

    def __call__(self, x, y) -> np.ndarray:
        x, y = np.asarray(x, float), np.asarray(y, float)
        z = x + 1j * y
        P = np.stack([(z**mm).real if kind == "cos" else (z**mm).imag for mm, kind in self.ang], -1)
        r2 = (x * x + y * y)[..., None]
        return np.concatenate([P * r2**j for j in range(self.radial)], -1)

    def expression(self, c: np.ndarray) -> str:
        terms = []
        strs = {mm: _poly_strings(mm) for mm, _ in self.ang}
        for q, cq in enumerate(np.asarray(c, float)):
            if cq == 0:
                continue
            j, a = divmod(q, self.angular)
            mm, kind = self.ang[a]
            p = strs[mm][0 if kind == "cos" else 1]
            r = f"*(x^2+y^2)^{j}" if j else ""
            terms.append(f"({float(cq)!r})*({p}){r}")
        return "+".join(terms) or "0"

    def metric(self, c: np.ndarray) -> MetricField:
        """The conformal metric of coefficients c.

        The expression string is kept as the metric's source (hash, output
        metadata), but evaluation goes through the basis directly: the
        expanded polynomial has a few hundred nodes and its generic
        derivative code is far slower than the closed forms.
        """
        m = MetricField.conformal(self.expression(c))
        m.lam = _BasisLambda(self, np.asarray(c, float), m.lam.src)
        return m


class _BasisLambda:
    """Stands in for an Expression: lambda = sum_a P_a(x) Q_a(|x|^2) with Q_a the radial
    polynomials of the coefficient table, so only the angular factors are formed."""

    def __init__(self, basis: ConformalBasis, c: np.ndarray, src: str):
        self.basis, self.src = basis, src
        self.c = np.asarray(c, float)
        C = self.c.reshape(basis.radial, basis.angular)
        self._Q = (C, npoly.polyder(C, 1, axis=0), npoly.polyder(C, 2, axis=0))

    def _parts(self, x, y, order):
        z = x + 1j * y
        r2 = x * x + y * y
        Q = [npoly.polyval(r2, q) if q.shape[0] else np.zeros((self.basis.angular,) + r2.shape)
             for q in self._Q[: order + 1]]
        mmax = max(mm for mm, _ in self.basis.ang)
        zp = [np.ones_like(z), z]
        for _ in range(2, mmax + 1):
            zp.append(zp[-1] * z)
        zpow = lambda k: zp[k] if k >= 0 else 0 * z
        return z, Q, zpow

    def __call__(self, x, y):
        return self.grad(x, y)[0]

    def grad(self, x, y):
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        _, (Q0, Q1), zpow = self._parts(x, y, 1)
        v = gx = gy = 0.0
        for a, (mm, kind) in enumerate(self.basis.ang):
            part = np.real if kind == "cos" else np.imag
            P, Px, Py = part(zpow(mm)), part(mm * zpow(mm - 1)), part(1j * mm * zpow(mm - 1))
            v = v + P * Q0[a]
            gx = gx + Px * Q0[a] + 2 * x * P * Q1[a]
            gy = gy + Py * Q0[a] + 2 * y * P * Q1[a]
        return v, gx, gy

    def jet(self, x, y) -> Jet2:
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        _, (Q0, Q1, Q2), zpow = self._parts(x, y, 2)
        out = [0.0] * 6
        for a, (mm, kind) in enumerate(self.basis.ang):
            part = np.real if kind == "cos" else np.imag
            b = mm * (mm - 1)
            P, Px, Py = part(zpow(mm)), part(mm * zpow(mm - 1)), part(1j * mm * zpow(mm - 1))
            Pxx, Pxy, Pyy = part(b * zpow(mm - 2)), part(1j * b * zpow(mm - 2)), part(-b * zpow(mm - 2))
            q0, q1, q2 = Q0[a], Q1[a], Q2[a]
            terms = (P * q0,
                     Px * q0 + 2 * x * P * q1,
                     Py * q0 + 2 * y * P * q1,
                     Pxx * q0 + 4 * x * Px * q1 + P * (4 * x * x * q2 + 2 * q1),
                     Pxy * q0 + 2 * y * Px * q1 + 2 * x * Py * q1 + 4 * x * y * P * q2,
                     Pyy * q0 + 4 * y * Py * q1 + P * (4 * y * y * q2 + 2 * q1))
            out = [o + t for o, t in zip(out, terms)]
        return Jet2(*out)

    @property
    def constant(self) -> bool:
        return not np.any(self.c[1:])


@dataclass(frozen=True)
class InversionConfig:
    radial: int = 6
    angular: int = 8
    step: float = 5e-3            # geodesic step of the forward model
    tol: float = 1e-6             # relative data residual for convergence
    max_iter: int = 50
    stall: float = 1e-3           # stop once an iteration improves the residual by less than this fraction
    rcond: float = 1e-10
    max_halvings: int = 6         # step halvings per iteration before giving up as stalled

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


class NonConvergenceError(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = list(history)


@dataclass
class InversionResult:
    coefficients: np.ndarray
    basis: ConformalBasis
    history: list
    status: str
    thetas: np.ndarray

    @property
    def iterations(self) -> int:
        return len(self.history) - 1

    def lam(self, x, y) -> np.ndarray:
        return self.basis(x, y) @ self.coefficients

    def metric(self) -> MetricField:
        return self.basis.metric(self.coefficients)

    def field(self, grid: PolarGrid) -> ScalarField:
        return ScalarField(grid, self.lam(*grid.points()))


def _pairs(n: int):
    return np.triu_indices(n, 1)


def linearized_travel_times(basis: ConformalBasis, c: np.ndarray, thetas, opts: FlowOptions = FlowOptions(),
                            angles=None) -> np.ndarray:
    """d(travel time)/dc for every boundary pair i < j.

    A perturbation e^{2 (lambda + d lambda)} changes the length of a curve by
    the integral of d lambda against g-arclength, and the geodesic is
    stationary, so the derivative is the basis integrated along the current
    geodesics.
    """
    th = np.asarray(thetas, float)
    i, j = _pairs(th.size)
    m = basis.metric(c)
    if angles is None:
        _, angles = shoot(m, th[i], th[j], opts)
    S0 = _boundary_start(m, th[i], angles)
    S0 = np.concatenate([S0, np.zeros((S0.shape[0], basis.size))], 1)
    res = integrate_batch(m, S0, opts, extra=lambda S: basis(S[:, 0], S[:, 1]))
    return res.state[:, 4:]


def invert_conformal(d_matrix: np.ndarray, cfg: InversionConfig = InversionConfig(),
                     thetas=None) -> InversionResult:
    """Gauss-Newton for lambda from boundary distances between points at chart angles ``thetas``.

    The points default to N uniform angles for an N x N matrix.  Each step
    is halved until the forward model succeeds and the residual drops.  Stops when
    the relative residual drops below ``cfg.tol`` ("converged") or stops
    improving ("stalled", the usual end for data outside the span of the
    basis or with noise); running out of iterations raises
    NonConvergenceError with the residual history.
    """
    D = np.asarray(d_matrix, float)
    n = D.shape[0]
    th = np.arange(n) * 2 * np.pi / n if thetas is None else np.asarray(thetas, float)
    i, j = _pairs(n)
    data = 0.5 * (D[i, j] + D[j, i])
    scale = np.linalg.norm(data)
    basis = ConformalBasis(cfg.radial, cfg.angular)
    opts = FlowOptions(step=cfg.step)

    def forward(c):
        model, angles = shoot(basis.metric(c), th[i], th[j], opts)
        r = data - model
        return r, angles, float(np.linalg.norm(r) / scale)

    c = np.zeros(basis.size)
    try:
        r, angles, rel = forward(c)
    except ShootingError as exc:
        raise NonConvergenceError(f"forward model failed on the initial metric: {exc}", []) from exc
    history = [rel]
    status = None
    for it in range(cfg.max_iter + 1):
        log.info("Gauss-Newton %d: relative residual %.3e", it, rel)
        if rel < cfg.tol:
            status = "converged"
            break
        if it == cfg.max_iter:
            raise NonConvergenceError(f"no convergence in {cfg.max_iter} iterations", history)
        J = linearized_travel_times(basis, c, th, opts, angles)
        dc = np.linalg.lstsq(J, r, rcond=cfg.rcond)[0]
        # damped step: halve while the forward model fails or the residual grows
        for _ in range(cfg.max_halvings + 1):
            try:
                trial = forward(c + dc)
            except ShootingError:
                dc = dc / 2
                continue
            if trial[2] < rel:
                break
            dc = dc / 2
        else:
            status = "stalled"
            break
        new_rel = trial[2]
        improved = new_rel < (1 - cfg.stall) * rel
        c = c + dc
        r, angles, rel = trial
        history.append(rel)
        if not improved:
            status = "stalled"
            break
    return InversionResult(c, basis, history, status, th)


def conformal_factor_error(result: InversionResult, lam_true, grid: PolarGrid | None = None) -> float:
    """Relative L^2 (Euclidean area) error of e^{2 lambda_hat} against e^{2 lambda}."""
    grid = grid or PolarGrid(32, 64)
    truth = ScalarField.from_function(grid, lam_true).values
    est = result.field(grid).values
    w = grid.area_weights(MetricField.euclidean())
    a, b = np.exp(2 * est), np.exp(2 * truth)
    return float(np.sqrt(np.sum((a - b) ** 2 * w) / np.sum(b**2 * w)))
