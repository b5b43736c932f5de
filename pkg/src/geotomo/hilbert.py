"""The fiberwise Hilbert transform and the horizontal vector fields on the circle bundle.

Fiber functions are callables ``u(x, y, beta)`` broadcasting over arrays, with
beta the angle in the orthonormal frame of the metric.  In that frame the
kernel (1 + (xi, eta)) / (xi_perp, eta) is cot((beta - beta')/2), so H has the
multiplier -i sgn(k) on the k-th harmonic: H cos = sin.  ``SIGMA`` records the
sign; the principal-value oracle below checks it against the kernel built from
g-inner products.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .flow import flow_for, start_state
from .geometry import MetricField
from .transport import BundleGrid, PolarGrid

SIGMA = 1.0


# ------------------------------------------------------------------ spectral transforms


def _multiplier(nbeta: int, parity: str | None = None) -> np.ndarray:
    k = np.fft.fftfreq(nbeta, 1.0 / nbeta)
    mult = -1j * SIGMA * np.sign(k)
    if nbeta % 2 == 0:
        mult[nbeta // 2] = 0.0     # the Nyquist mode has no conjugate partner
    if parity == "even":
        mult = np.where(k % 2 == 0, mult, 0.0)
    elif parity == "odd":
        mult = np.where(k % 2 == 1, mult, 0.0)
    return mult


def hilbert_values(values: np.ndarray, parity: str | None = None) -> np.ndarray:
    """H (or H+ / H-) along the last axis of samples on a uniform beta grid."""
    values = np.asarray(values, float)
    c = np.fft.fft(values, axis=-1)
    return np.fft.ifft(c * _multiplier(values.shape[-1], parity), axis=-1).real


def hilbert_fiber(u: BundleGrid) -> BundleGrid:
    return BundleGrid(u.grid, u.nbeta, hilbert_values(u.values))


def hilbert_even(u: BundleGrid) -> BundleGrid:
    """H+ u = H(u+), u+ the even part in xi (even harmonics)."""
    return BundleGrid(u.grid, u.nbeta, hilbert_values(u.values, "even"))


def hilbert_odd(u: BundleGrid) -> BundleGrid:
    return BundleGrid(u.grid, u.nbeta, hilbert_values(u.values, "odd"))


def pv_hilbert(m: MetricField, u: Callable, x: float, y: float, beta, n: int = 4096) -> np.ndarray:
    """Direct principal-value quadrature of (1/2pi) int (1 + (xi, eta))/(xi_perp, eta) u(eta) dOmega.

    The midpoint nodes are placed symmetrically about each xi, so the odd
    singular part cancels pairwise and the rest is a smooth periodic integrand.
    """
    beta = np.atleast_1d(np.asarray(beta, float))
    out = np.empty(beta.shape)
    offs = (np.arange(n) + 0.5) * 2 * np.pi / n
    for i, b in enumerate(beta):
        xi = np.array(m.unit_vector(x, y, b), float)
        xi_perp = m.rotate_perp(x, y, xi)
        eta_b = b + offs
        ex, ey = m.unit_vector(np.full(n, x), np.full(n, y), eta_b)
        eta = np.stack([ex, ey], -1)
        c = m.inner(x, y, xi, eta)
        s = m.inner(x, y, xi_perp, eta)
        vals = np.asarray(u(np.full(n, x), np.full(n, y), eta_b), float)
        out[i] = ((1 + c) / s * vals).sum() / n
    return out


# ------------------------------------------------------------------ callables


def fiber_samples(u: Callable, x, y, nbeta: int) -> np.ndarray:
    """u at (x, y) on the uniform beta grid: shape x.shape + (nbeta,)."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    b = np.arange(nbeta) * 2 * np.pi / nbeta
    return np.asarray(u(x[..., None], y[..., None], b), float) * np.ones(x.shape + (nbeta,))


def _trig_eval(values: np.ndarray, beta) -> np.ndarray:
    """Evaluate the trigonometric interpolant of fiber samples at beta (same leading shape)."""
    n = values.shape[-1]
    c = np.fft.fft(values, axis=-1) / n
    k = np.fft.fftfreq(n, 1.0 / n)
    if n % 2 == 0:
        c[..., n // 2] *= 0.5
        c = np.concatenate([c, c[..., n // 2: n // 2 + 1]], axis=-1)
        k = np.concatenate([k, [n // 2]])
    phase = np.exp(1j * np.asarray(beta, float)[..., None] * k)
    return (c * phase).sum(-1).real


def hilbert_callable(u: Callable, nbeta: int = 64, parity: str | None = None) -> Callable:
    """The fiber function Hu (or H+ u / H- u), exact for u band-limited below nbeta/2."""
    def Hu(x, y, beta):
        x, y, beta = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float), np.asarray(beta, float))
        vals = hilbert_values(fiber_samples(u, x, y, nbeta), parity)
        return _trig_eval(vals, beta)
    return Hu


def fiber_mean_callable(u: Callable, nbeta: int = 64) -> Callable:
    def u0(x, y, beta=None):
        return fiber_samples(u, x, y, nbeta).mean(-1)
    return u0


def fiber_interpolant(b: BundleGrid) -> Callable:
    """Callable of a sampled bundle function: polar cubic in x, trigonometric in beta."""
    grid: PolarGrid = b.grid
    flat = b.values.reshape(grid.size, b.nbeta)

    def u(x, y, beta):
        # spatial interpolation commutes with the fiber transform: interpolate the
        # samples, then evaluate their trigonometric interpolant
        x, y, beta = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float), np.asarray(beta, float))
        idx, w = grid._stencil(x, y)
        c = np.einsum("ps,psk->pk", w, flat[idx])
        return _trig_eval(c.reshape(x.shape + (b.nbeta,)), beta)
    return u


# ------------------------------------------------------------------ horizontal derivatives


def horizontal_derivative(m: MetricField, u: Callable, x, y, beta, alpha, dt: float = 1e-2) -> np.ndarray:
    """(e, grad u)(x, beta) for e = xi(alpha), by a central difference along the geodesic of e.

    The fiber argument is parallel transported along that geodesic; since
    parallel transport keeps angles, the transported xi(beta) sits at frame
    angle  angle(gamma') + beta - alpha.
    """
    x, y, beta, alpha = np.broadcast_arrays(*(np.asarray(a, float) for a in (x, y, beta, alpha)))
    shape = x.shape
    S0 = start_state(m, np.stack([x.ravel(), y.ravel()], -1), alpha.ravel())
    rel = (beta - alpha).ravel()
    vals = []
    for sgn in (1.0, -1.0):
        S = flow_for(m, S0, sgn * dt, step=dt)
        ang = m.frame_angle(S[:, 0], S[:, 1], S[:, 2], S[:, 3]) + rel
        vals.append(np.asarray(u(S[:, 0], S[:, 1], ang), float))
    return ((vals[0] - vals[1]) / (2 * dt)).reshape(shape)


def geodesic_derivative(m: MetricField, u: Callable, x, y, beta, dt: float = 1e-2) -> np.ndarray:
    """The geodesic vector field applied to u: d/dt u(phi_t(x, xi)) at t = 0."""
    return horizontal_derivative(m, u, x, y, beta, beta, dt)


def perp_derivative(m: MetricField, u: Callable, x, y, beta, dt: float = 1e-2) -> np.ndarray:
    """(xi_perp, grad u) with xi_perp = xi(beta - pi/2)."""
    beta = np.asarray(beta, float)
    return horizontal_derivative(m, u, x, y, beta, beta - np.pi / 2, dt)


def as_fiber(f: Callable) -> Callable:
    """Lift f(x, y) to a fiber function constant on every fiber."""
    return lambda x, y, beta: np.asarray(f(x, y), float) + 0 * np.asarray(beta, float)


# ------------------------------------------------------------------ commutator identity


@dataclass
class CommutatorReport:
    dt: float
    residual: float          # sup |[H, Hg] u - Hp u0 - (Hp u)0|
    split_plus: float        # sup |H+ Hg u - Hg H- u - (Hp u)0|
    split_minus: float       # sup |H- Hg u - Hg H+ u - Hp u0|
    scale: float             # sup |[H, Hg] u|, for relative reading

    def as_dict(self) -> dict:
        return dict(dt=self.dt, residual=self.residual, split_plus=self.split_plus,
                    split_minus=self.split_minus, scale=self.scale)


def interior_nodes(nr: int = 6, ntheta: int = 12, rmax: float = 0.8):
    g = PolarGrid(nr, ntheta, rmax)
    x, y = g.points()
    return x.ravel(), y.ravel()


def commutator_residual(m: MetricField, u: Callable, dt: float = 2e-2, nbeta: int = 32,
                        nodes=None) -> CommutatorReport:
    """Residuals of the commutator formula and its two parity splits at interior nodes.

    Every term is evaluated independently: horizontal derivatives by flow
    differences, H spectrally on the fiber.
    """
    x, y = interior_nodes() if nodes is None else nodes
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    b = np.arange(nbeta) * 2 * np.pi / nbeta
    X = np.broadcast_to(x[:, None], (x.size, nbeta))
    Y = np.broadcast_to(y[:, None], (x.size, nbeta))
    B = np.broadcast_to(b, (x.size, nbeta))

    def D(f):      # geodesic derivative on the node x fiber grid
        return geodesic_derivative(m, f, X, Y, B, dt)

    def P(f):
        return perp_derivative(m, f, X, Y, B, dt)

    Hg_u = D(u)
    H_u = hilbert_callable(u, nbeta)
    Hp_u = hilbert_callable(u, nbeta, "even")
    Hm_u = hilbert_callable(u, nbeta, "odd")
    u0 = fiber_mean_callable(u, nbeta)

    perp_u0 = P(lambda a, c, beta: u0(a, c))
    mean_perp_u = P(u).mean(-1, keepdims=True)

    lhs = hilbert_values(Hg_u) - D(H_u)
    main = lhs - perp_u0 - mean_perp_u
    plus = hilbert_values(Hg_u, "even") - D(Hm_u) - mean_perp_u
    minus = hilbert_values(Hg_u, "odd") - D(Hp_u) - perp_u0
    return CommutatorReport(dt, float(np.abs(main).max()), float(np.abs(plus).max()),
                            float(np.abs(minus).max()), float(np.abs(lhs).max()))


# ------------------------------------------------------------------ X-ray of a derivative


@dataclass
class XrayIdentityReport:
    dt: float
    ns: int
    nphi: int
    direct: float     # sup |I Hg f - (f o alpha - f)| with f o alpha at the exact exit state
    pullback: float   # sup |I Hg f + A-* f0| with the grid pullback of f0
    scale: float

    def as_dict(self) -> dict:
        return dict(dt=self.dt, ns=self.ns, nphi=self.nphi, direct=self.direct,
                    pullback=self.pullback, scale=self.scale)


def boundary_phase(chart, s, vartheta):
    """(x, y, beta) of the boundary vector at full-circle angle vartheta from nu."""
    p, v = chart.inward_vector(np.asarray(s, float), np.asarray(vartheta, float))
    m = chart.metric
    return p[..., 0], p[..., 1], m.frame_angle(p[..., 0], p[..., 1], v[..., 0], v[..., 1])


def xray_identities(m: MetricField, f: Callable, ns: int = 32, nphi: int = 16, dt: float = 2e-2,
                    step: float = 1e-3, table=None) -> XrayIdentityReport:
    """Compare I(Hg f) with f o alpha - f and with -A-* f0 on the inward nodes.

    The tangential band |cos phi| < BAND is left out of the sup norms.
    """
    from .bundle import BAND, BoundaryFiberGrid, a_star, outward_to_full, scattering_relation
    from .transport import FiberFunction, xray

    table = table or scattering_relation(m, ns, nphi, step)
    chart = table.chart
    S, P = np.meshgrid(table.s, table.phi, indexing="ij")
    Hf = FiberFunction(lambda x, y, b: geodesic_derivative(m, f, x, y, b, dt))
    lhs = xray(m, Hf, S, P, step, chart)

    x0, y0, b0 = boundary_phase(chart, S, P)
    x1, y1, b1 = boundary_phase(chart, table.s_exit, outward_to_full(table.p_exit))
    direct = f(x1, y1, b1) - f(x0, y0, b0)

    f0 = BoundaryFiberGrid.from_function(chart, table.ns, table.nphi,
                                         lambda s, vt: f(*boundary_phase(chart, s, vt)), "full")
    pull = -a_star(table, f0, -1).values
    keep = np.abs(np.cos(P)) >= BAND
    return XrayIdentityReport(dt, table.ns, table.nphi,
                              float(np.abs(lhs - direct)[keep].max()),
                              float(np.abs(lhs - pull)[keep].max()),
                              float(np.abs(direct)[keep].max()))
