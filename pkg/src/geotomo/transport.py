"""The geodesic X-ray transform, its adjoint and the normal operator.

Scalar fields live on a polar grid (midpoints in r, uniform in theta) and are
interpolated by 4 x 4 cubic Lagrange stencils.  Stencils that reach below the
origin use the reflection f(-r, theta) = f(r, theta + pi), so the grid has no
special centre node.

Line integrals are computed by adding the integrand as an extra column of the
geodesic state; RK4 on a column whose derivative does not depend on it is a
Simpson rule on each step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import sparse

from .bundle import BoundaryFiberGrid, transport_extend
from .expr import Expression
from .flow import FlowOptions, _boundary_start_radius, integrate_batch, start_state
from .geometry import BoundaryChart, MetricField

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ polar grid


@dataclass(frozen=True)
class PolarGrid:
    nr: int
    ntheta: int
    radius: float = 1.0

    def __post_init__(self):
        if self.ntheta % 2:
            raise ValueError("ntheta must be even for the reflection through the origin")
        if self.nr < 4:
            raise ValueError("cubic stencils need nr >= 4")

    @property
    def dr(self) -> float:
        return self.radius / self.nr

    @property
    def dtheta(self) -> float:
        return 2 * np.pi / self.ntheta

    @property
    def r(self) -> np.ndarray:
        return (np.arange(self.nr) + 0.5) * self.dr

    @property
    def theta(self) -> np.ndarray:
        return np.arange(self.ntheta) * self.dtheta

    @property
    def shape(self):
        return (self.nr, self.ntheta)

    @property
    def size(self) -> int:
        return self.nr * self.ntheta

    def points(self):
        R, T = np.meshgrid(self.r, self.theta, indexing="ij")
        return R * np.cos(T), R * np.sin(T)

    def area_weights(self, m: MetricField) -> np.ndarray:
        """sqrt(det g) r dr dtheta at every node (midpoint rule in r)."""
        x, y = self.points()
        R = np.hypot(x, y)
        return m.sqrt_det(x, y) * R * self.dr * self.dtheta

    # interpolation -------------------------------------------------------
    def _stencil(self, x, y):
        x = np.asarray(x, float).ravel()
        y = np.asarray(y, float).ravel()
        r = np.hypot(x, y)
        th = np.arctan2(y, x)
        u = r / self.dr - 0.5
        base = np.clip(np.floor(u).astype(int) - 1, -2, self.nr - 4)
        ri = base[:, None] + np.arange(4)[None, :]
        wr = _lagrange4(u - base)
        v = np.mod(th, 2 * np.pi) / self.dtheta
        tb = np.floor(v).astype(int) - 1
        tj = tb[:, None] + np.arange(4)[None, :]
        wt = _lagrange4(v - tb)
        # rows of the radial stencil below the origin: reflect
        neg = ri < 0
        ri_eff = np.where(neg, -ri - 1, ri)
        shift = np.where(neg, self.ntheta // 2, 0)
        cols = np.mod(tj[:, None, :] + shift[:, :, None], self.ntheta)
        idx = ri_eff[:, :, None] * self.ntheta + cols
        w = wr[:, :, None] * wt[:, None, :]
        return idx.reshape(-1, 16), w.reshape(-1, 16)

    def interp_values(self, values, x, y) -> np.ndarray:
        idx, w = self._stencil(x, y)
        flat = np.asarray(values, float).ravel()
        return (flat[idx] * w).sum(-1)

    def interp_matrix(self, x, y) -> sparse.csr_matrix:
        idx, w = self._stencil(x, y)
        n = idx.shape[0]
        rows = np.repeat(np.arange(n), 16)
        return sparse.csr_matrix((w.ravel(), (rows, idx.ravel())), shape=(n, self.size))


def _lagrange4(t):
    """Cubic Lagrange weights on nodes 0, 1, 2, 3 at positions t (shape (n,)) -> (n, 4)."""
    t = np.asarray(t, float)[:, None]
    return np.concatenate([
        -(t - 1) * (t - 2) * (t - 3) / 6,
        t * (t - 2) * (t - 3) / 2,
        -t * (t - 1) * (t - 3) / 2,
        t * (t - 1) * (t - 2) / 6,
    ], axis=1)


@dataclass
class ScalarField:
    grid: PolarGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, float).reshape(self.grid.shape)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("scalar field has non-finite values")

    @classmethod
    def from_function(cls, grid: PolarGrid, fn) -> "ScalarField":
        x, y = grid.points()
        return cls(grid, np.asarray(_as_callable(fn)(x, y), float) * np.ones(grid.shape))

    def __call__(self, x, y):
        shape = np.broadcast(np.asarray(x), np.asarray(y)).shape
        return self.grid.interp_values(self.values, x, y).reshape(shape)

    def l2(self, m: MetricField) -> float:
        return float(np.sqrt((self.values**2 * self.grid.area_weights(m)).sum()))

    def inner(self, other: "ScalarField", m: MetricField) -> float:
        return float((self.values * other.values * self.grid.area_weights(m)).sum())


@dataclass
class BundleGrid:
    """Samples u(x_i, beta_k) on the polar grid times N_beta uniform frame angles."""

    grid: PolarGrid
    nbeta: int
    values: np.ndarray = None

    def __post_init__(self):
        if self.values is None:
            self.values = np.zeros(self.grid.shape + (self.nbeta,))
        self.values = np.asarray(self.values, float).reshape(self.grid.shape + (self.nbeta,))

    @property
    def beta(self) -> np.ndarray:
        return np.arange(self.nbeta) * 2 * np.pi / self.nbeta

    @property
    def fiber_weight(self) -> float:
        return 2 * np.pi / self.nbeta

    def phase_points(self):
        x, y = self.grid.points()
        X = np.broadcast_to(x[..., None], self.values.shape)
        Y = np.broadcast_to(y[..., None], self.values.shape)
        B = np.broadcast_to(self.beta, self.values.shape)
        return X, Y, B

    @classmethod
    def from_function(cls, grid: PolarGrid, nbeta: int, fn) -> "BundleGrid":
        b = cls(grid, nbeta)
        b.values = np.asarray(fn(*b.phase_points()), float) * np.ones(b.values.shape)
        return b

    def fiber_integral(self) -> ScalarField:
        return ScalarField(self.grid, self.values.sum(-1) * self.fiber_weight)

    def fiber_mean(self) -> ScalarField:
        return ScalarField(self.grid, self.values.mean(-1))


# ------------------------------------------------------------------ integrands


@dataclass(frozen=True)
class FiberFunction:
    """Marks a callable fn(x, y, beta) of a phase point, as opposed to fn(x, y)."""

    fn: Callable


def _as_callable(f):
    if isinstance(f, str):
        f = Expression(f)
    if isinstance(f, Expression):
        return lambda x, y: f(x, y)
    return f


def _integrand(m: MetricField, f):
    """extra(S) for integrate_batch: the integrand evaluated on state rows."""
    if isinstance(f, FiberFunction):
        fn = f.fn

        def extra(S):
            beta = m.frame_angle(S[:, 0], S[:, 1], S[:, 2], S[:, 3])
            return np.asarray(fn(S[:, 0], S[:, 1], beta), float)[:, None] * np.ones((S.shape[0], 1))
        return extra
    fn = _as_callable(f)

    def extra(S):
        return np.asarray(fn(S[:, 0], S[:, 1]), float)[:, None] * np.ones((S.shape[0], 1))
    return extra


def line_integrals(m: MetricField, f, S0: np.ndarray, step: float = 1e-3, radius: float = 1.0):
    """Integral of f along the geodesics of S0 (rows x, y, vx, vy) until |x| = radius.

    Returns (integrals, exit states, tau).
    """
    S0 = np.asarray(S0, float)
    aug = np.concatenate([S0, np.zeros((S0.shape[0], 1))], axis=1)
    res = integrate_batch(m, aug, FlowOptions(step=step, radius=radius), extra=_integrand(m, f))
    if not np.all(res.exited):
        raise RuntimeError(f"{int((~res.exited).sum())} geodesics did not exit")
    return res.state[:, 4], res.state[:, :4], res.tau


# ------------------------------------------------------------------ X-ray transform


def xray(m: MetricField, f, s, phi, step: float = 1e-3, chart: BoundaryChart | None = None) -> np.ndarray:
    """If at inward boundary points (s, phi): the integral of f over the geodesic they start."""
    chart = chart or BoundaryChart(m)
    s, phi = np.broadcast_arrays(np.asarray(s, float), np.asarray(phi, float))
    S0 = _boundary_start_radius(m, chart.theta(s.ravel()), phi.ravel(), chart.radius)
    vals, _, _ = line_integrals(m, f, S0, step, chart.radius)
    return vals.reshape(s.shape)


def sinogram(m: MetricField, f, ns: int, nphi: int, step: float = 1e-3,
             chart: BoundaryChart | None = None) -> BoundaryFiberGrid:
    chart = chart or BoundaryChart(m)
    grid = BoundaryFiberGrid.from_function(chart, ns, nphi, lambda s, p: 0.0)
    S, P = np.meshgrid(grid.s, grid.angles, indexing="ij")
    grid.values = xray(m, f, S, P, step, chart)
    return grid


# ------------------------------------------------------------------ adjoint and normal operator


def istar(w: BoundaryFiberGrid, grid: PolarGrid, nbeta: int = 64, step: float = 5e-3,
          chunk: int = 40_000) -> ScalarField:
    """I* w on the polar grid: the fiber integral of the transported w at every node."""
    b = BundleGrid(grid, nbeta)
    X, Y, B = (a.ravel() for a in b.phase_points())
    out = np.empty(X.size)
    for lo in range(0, X.size, chunk):
        sl = slice(lo, lo + chunk)
        out[sl] = transport_extend(w, X[sl], Y[sl], B[sl], step)
    b.values = out.reshape(b.values.shape)
    return b.fiber_integral()


def normal_op(m: MetricField, f, where, nbeta: int = 64, step: float = 5e-3, radius: float = 1.0):
    """(I*I f)(x) = int over the fiber of the two-sided line integral of f, evaluated directly.

    ``where`` is a PolarGrid (returns a ScalarField) or an (n, 2) array of points.
    The two-sided integral through (x, xi) is the sum of the one-sided integrals
    along xi and -xi, so the fiber integral is twice the fiber integral of the
    one-sided ones.
    """
    if isinstance(where, PolarGrid):
        x, y = where.points()
        pts = np.stack([x.ravel(), y.ravel()], -1)
    else:
        pts = np.atleast_2d(np.asarray(where, float))
    beta = np.arange(nbeta) * 2 * np.pi / nbeta
    X = np.repeat(pts, nbeta, axis=0)
    B = np.tile(beta, pts.shape[0])
    vals, _, _ = line_integrals(m, f, start_state(m, X, B), step, radius)
    out = 2 * (2 * np.pi / nbeta) * vals.reshape(-1, nbeta).sum(-1)
    if isinstance(where, PolarGrid):
        return ScalarField(where, out.reshape(where.shape))
    return out


@dataclass
class NormalOperator:
    """I* I on a polar grid with the geodesic fan through every node cached.

    Row k of ``K`` holds the fiber integral, over ``nbeta`` directions at node k,
    of the line integrals of the cubic interpolation basis (Simpson on the RK4
    steps).  So ``K @ f`` is the direct fiber-times-line quadrature of I*I
    applied to the interpolant of f.  The exact operator is self-adjoint for the
    area inner product; ``symmetric`` is the M-symmetrised form
    (M K + K^T M) / 2 that CG works with, and ``asymmetry`` reports how far K
    itself is from it.  The cached K is accurate as a collocation operator but
    its asymmetry is not small (the kernel is singular on the diagonal), so
    solves use the normal equations K^T M K rather than the symmetrised form.
    """

    metric: MetricField
    grid: PolarGrid
    nbeta: int = 32
    step: float = 2e-2
    K: np.ndarray = field(init=False, repr=False)
    mass: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        from .flow import rk4_step

        m, grid = self.metric, self.grid
        n = grid.size
        x, y = grid.points()
        X = np.repeat(np.stack([x.ravel(), y.ravel()], -1), self.nbeta, axis=0)
        B = np.tile(np.arange(self.nbeta) * 2 * np.pi / self.nbeta, n)
        owner = np.repeat(np.arange(n), self.nbeta)
        S0 = start_state(m, X, B)
        prev, tprev = S0.copy(), np.zeros(S0.shape[0])
        acc = np.zeros(n * n)
        scale = 2 * (2 * np.pi / self.nbeta)

        def add(idx, a, b, h):
            mid = rk4_step(m, a, 0.5 * h)
            pts = np.concatenate([a[:, :2], mid[:, :2], b[:, :2]])
            q = scale * np.concatenate([h, 4 * h, h]) / 6
            cols, w = grid._stencil(pts[:, 0], pts[:, 1])
            rows = np.tile(owner[idx], 3)
            acc[:] += np.bincount((rows[:, None] * n + cols).ravel(), (w * q[:, None]).ravel(),
                                  minlength=n * n)

        def on_step(idx, rows, t):
            add(idx, prev[idx], rows, t - tprev[idx])
            prev[idx] = rows
            tprev[idx] = t

        res = integrate_batch(m, S0, FlowOptions(step=self.step, radius=grid.radius), on_step=on_step)
        if not np.all(res.exited):
            raise RuntimeError("fan geodesics did not exit the disk")
        last = np.arange(S0.shape[0])
        add(last, prev, res.state, res.tau - tprev)
        self.K = acc.reshape(n, n)
        self.mass = grid.area_weights(m).ravel()

    @property
    def symmetric(self) -> np.ndarray:
        MK = self.mass[:, None] * self.K
        return 0.5 * (MK + MK.T)

    @property
    def asymmetry(self) -> float:
        MK = self.mass[:, None] * self.K
        return float(np.linalg.norm(MK - MK.T) / np.linalg.norm(MK))

    def __call__(self, f: ScalarField) -> ScalarField:
        return ScalarField(self.grid, self.K @ f.values.ravel())


# ------------------------------------------------------------------ constructive surjectivity


def quintic_blend(r, start: float = 1.0, width: float = 0.1) -> np.ndarray:
    """1 for r <= start, 0 for r >= start + width, C^2 quintic smoothstep in between."""
    t = np.clip((np.asarray(r, float) - start) / width, 0.0, 1.0)
    return 1.0 - t**3 * (10 - 15 * t + 6 * t**2)


@dataclass
class IstarConfig:
    delta: float = 0.2
    grid_n: tuple = (32, 64)        # polar grid on the enlarged disk
    nbeta_n: int = 48               # fan directions per node for the cached operator
    fan_step: float = 2e-2
    ns: int = 128                   # output w grid on the inward boundary of M
    nphi: int = 128
    verify_grid: tuple = (16, 32)
    verify_nbeta: int = 64
    step: float = 5e-3
    cg_tol: float = 1e-6
    cg_maxiter: int = 500
    check_simplicity: bool = True


@dataclass
class IstarSolution:
    w: BoundaryFiberGrid
    f: ScalarField
    h_tilde: ScalarField
    cg_iterations: int
    cg_residual: float
    restricted_residual: float
    verify_error: float
    operator_asymmetry: float

    def as_dict(self) -> dict:
        return {"cg_iterations": self.cg_iterations, "cg_residual": self.cg_residual,
                "restricted_residual": self.restricted_residual, "verify_error": self.verify_error,
                "operator_asymmetry": self.operator_asymmetry}


class SimplicityError(RuntimeError):
    pass


def solve_istar(m: MetricField, h, cfg: IstarConfig = IstarConfig()) -> IstarSolution:
    """Find w on the inward boundary of M with I* w = h.

    h is blended to zero across the whole collar 1 < r < 1 + delta, the equation
    I_N* I_N f = h~ is solved on the disk N of radius 1 + delta by CG, and
    w(x, xi) = u^f(x, xi) + u^f(x, -xi), the integral of f over the whole
    geodesic of N through the boundary point.
    """
    from scipy.sparse.linalg import cg
    from .flow import check_simple

    R = 1.0 + cfg.delta
    if cfg.check_simplicity:
        rep = check_simple(m, radius=R)
        if not rep.simple:
            raise SimplicityError(f"enlarged disk of radius {R} is not simple: {rep.as_dict()}")
    gridN = PolarGrid(cfg.grid_n[0], cfg.grid_n[1], R)
    hfun = h if isinstance(h, ScalarField) else _as_callable(h)
    xN, yN = gridN.points()
    # a steep blend makes f rough and the fan quadrature aliases it
    blend = quintic_blend(np.hypot(xN, yN), 1.0, cfg.delta)
    live = blend > 0
    hv = np.zeros(gridN.shape)
    hv[live] = np.asarray(hfun(xN[live], yN[live]), float) * blend[live]
    h_tilde = ScalarField(gridN, hv)

    op = NormalOperator(m, gridN, cfg.nbeta_n, cfg.fan_step)
    # least squares in the area norm: K^T M K f = K^T M h~ is symmetric positive
    MK = op.mass[:, None] * op.K
    A = op.K.T @ MK
    b = MK.T @ hv.ravel()
    its = [0]

    def count(_):
        its[0] += 1

    if np.all(hv == 0):
        fv = np.zeros(gridN.size)
    else:
        fv, _ = cg(A, b, rtol=cfg.cg_tol, maxiter=cfg.cg_maxiter, callback=count)
    res = float(np.linalg.norm(A @ fv - b) / max(np.linalg.norm(b), 1e-300))
    if res > 10 * cfg.cg_tol:
        log.warning("CG stopped at relative residual %.3g after %d iterations", res, its[0])
    f = ScalarField(gridN, fv)
    inside = (np.hypot(xN, yN) <= 1.0).ravel()
    Nf = op.K @ fv
    restricted = float(np.linalg.norm((Nf - hv.ravel())[inside] * np.sqrt(op.mass[inside]))
                       / max(np.linalg.norm(hv.ravel()[inside] * np.sqrt(op.mass[inside])), 1e-300))

    # w on the inward grid of M: the integral of f over the full geodesic of N
    chart = BoundaryChart(m)
    w = BoundaryFiberGrid.from_function(chart, cfg.ns, cfg.nphi, lambda s, p: 0.0)
    if np.any(fv):
        S, P = np.meshgrid(w.s, w.angles, indexing="ij")
        S0 = _boundary_start_radius(m, chart.theta(S.ravel()), P.ravel(), 1.0)
        back = S0.copy()
        back[:, 2:] *= -1
        fwd_v, _, _ = line_integrals(m, f, S0, cfg.step, R)
        bwd_v, _, _ = line_integrals(m, f, back, cfg.step, R)
        w.values = (fwd_v + bwd_v).reshape(S.shape)

    err = verify_istar(m, w, hfun, cfg)
    return IstarSolution(w, f, h_tilde, its[0], res, restricted, err, op.asymmetry)


def verify_istar(m: MetricField, w: BoundaryFiberGrid, h, cfg: IstarConfig = IstarConfig()) -> float:
    """Relative L2(M) error of I* w (computed by backtracing) against h."""
    grid = PolarGrid(cfg.verify_grid[0], cfg.verify_grid[1])
    hs = ScalarField.from_function(grid, h if not isinstance(h, ScalarField) else h)
    if not np.any(w.values):
        return 0.0 if hs.l2(m) == 0 else 1.0
    got = istar(w, grid, cfg.verify_nbeta, cfg.step)
    diff = ScalarField(grid, got.values - hs.values)
    return diff.l2(m) / max(hs.l2(m), 1e-300)
