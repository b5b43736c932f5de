"""Metrics on the closed unit disk and the differential geometry built on them.

Conventions fixed once for the whole package:

* ``rotate_perp`` lowers with ``eps = sqrt(det g) [[0, 1], [-1, 0]]`` and
  raises back, so on the Euclidean disk it is the *clockwise* quarter turn
  ``(1, 0) -> (0, -1)``.
* The orthonormal frame is ``e1 = d/dx / |d/dx|`` and ``e2 = -rotate_perp(e1)``,
  which is positively oriented.  A unit vector is stored by its frame angle
  ``beta``: ``xi = cos(beta) e1 + sin(beta) e2``.  Consequently
  ``rotate_perp(xi(beta)) == xi(beta - pi/2)``.
* On the boundary, ``nu`` is the g-unit inner normal and fiber angles ``phi``
  are measured from ``nu`` in the same (counterclockwise) sense, so an
  inward vector is ``cos(phi) nu + sin(phi) R(nu)`` with ``R = -rotate_perp``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .expr import Expression

PROBE_N = 64
ARC_NODES = 4096


class SingularMetricError(ValueError):
    pass


def _as_xy(x, y=None):
    if y is None:
        p = np.asarray(x, dtype=float)
        return p[..., 0], p[..., 1]
    return np.asarray(x, dtype=float), np.asarray(y, dtype=float)


class MetricField:
    """A Riemannian metric on a neighbourhood of the closed unit disk.

    Either conformal, ``g = exp(2*lam) * I``, or general with explicit
    component expressions.  Construction probes the metric on a
    64x64 grid covering the disk and raises :class:`SingularMetricError`
    if it is not positive definite somewhere.
    """

    def __init__(self, lam: str | None = None, g11: str | None = None,
                 g12: str | None = None, g22: str | None = None, probe_radius: float = 1.0):
        if lam is not None:
            if any(v is not None for v in (g11, g12, g22)):
                raise ValueError("give either lam or g11/g12/g22, not both")
            self.kind = "conformal"
            self.lam = Expression(lam)
            self.sources = {"lambda": lam}
        else:
            if any(v is None for v in (g11, g12, g22)):
                raise ValueError("general metric needs g11, g12 and g22")
            self.kind = "general"
            self.lam = None
            self.g = (Expression(g11), Expression(g12), Expression(g22))
            self.sources = {"g11": g11, "g12": g12, "g22": g22}
        self.flat = self.kind == "conformal" and self.lam.constant
        self._probe(probe_radius)

    # constructors -------------------------------------------------------
    @classmethod
    def euclidean(cls) -> "MetricField":
        return cls(lam="0")

    @classmethod
    def conformal(cls, lam: str) -> "MetricField":
        return cls(lam=lam)

    @classmethod
    def general(cls, g11: str, g12: str, g22: str) -> "MetricField":
        return cls(g11=g11, g12=g12, g22=g22)

    def __repr__(self):
        inner = ", ".join(f"{k}={v!r}" for k, v in self.sources.items())
        return f"MetricField({self.kind}: {inner})"

    @property
    def hash(self) -> str:
        text = ";".join(f"{k}={v}" for k, v in sorted(self.sources.items()))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def _probe(self, radius: float):
        t = np.linspace(-radius, radius, PROBE_N)
        X, Y = np.meshgrid(t, t)
        inside = X ** 2 + Y ** 2 <= radius ** 2 + 1e-12
        g11, g12, g22 = self.components(X[inside], Y[inside])
        det = g11 * g22 - g12 ** 2
        if not (np.all(np.isfinite(det)) and np.all(det > 0) and np.all(g11 > 0)):
            raise SingularMetricError("metric is not positive definite on the probe grid")

    # components ---------------------------------------------------------
    def components(self, x, y=None):
        x, y = _as_xy(x, y)
        if self.kind == "conformal":
            c = np.exp(2 * self.lam(x, y))
            return c, np.zeros_like(c), c
        return tuple(np.broadcast_to(gi(x, y), np.broadcast(x, y).shape).astype(float)
                     for gi in self.g)

    def matrix(self, x, y=None):
        g11, g12, g22 = self.components(x, y)
        return np.stack([np.stack([g11, g12], -1), np.stack([g12, g22], -1)], -2)

    def sqrt_det(self, x, y=None):
        g11, g12, g22 = self.components(x, y)
        det = g11 * g22 - g12 ** 2
        if np.any(det <= 0):
            raise SingularMetricError("det g <= 0")
        return np.sqrt(det)

    def inner(self, x, y, u, v):
        """g(u, v) at (x, y); u, v have a trailing axis of length 2."""
        g11, g12, g22 = self.components(x, y)
        u = np.asarray(u, float)
        v = np.asarray(v, float)
        return g11 * u[..., 0] * v[..., 0] + g12 * (u[..., 0] * v[..., 1] + u[..., 1] * v[..., 0]) \
            + g22 * u[..., 1] * v[..., 1]

    def norm(self, x, y, v):
        return np.sqrt(self.inner(x, y, v, v))

    def _component_jets(self, x, y):
        if self.kind == "conformal":
            j = self.lam.jet(x, y)
            return j
        return tuple(gi.jet(x, y) for gi in self.g)

    # Christoffel symbols --------------------------------------------------
    def christoffel(self, x, y=None):
        """Gamma[..., i, j, k] = Gamma^i_{jk}."""
        x, y = _as_xy(x, y)
        shape = np.broadcast(x, y).shape
        G = np.zeros(shape + (2, 2, 2))
        if self.kind == "conformal":
            _, lx, ly = self.lam.grad(x, y)
            d = (lx, ly)
            for i in range(2):
                for j in range(2):
                    for k in range(2):
                        val = np.zeros(shape)
                        if i == k:
                            val = val + d[j]
                        if j == k:
                            val = val + d[i]
                        if i == j:
                            val = val - d[k]
                        # stored as Gamma^k_{ij}
                        G[..., k, i, j] = val
            return G
        g11, g12, g22 = (gi.grad(x, y) for gi in self.g)
        comp = {(0, 0): g11, (0, 1): g12, (1, 0): g12, (1, 1): g22}
        det = g11[0] * g22[0] - g12[0] ** 2
        if np.any(det <= 0):
            raise SingularMetricError("det g <= 0")
        inv = {(0, 0): g22[0] / det, (0, 1): -g12[0] / det, (1, 0): -g12[0] / det,
               (1, 1): g11[0] / det}

        def dg(a, b, c):  # d_c g_ab
            return comp[(a, b)][1 + c]

        for i in range(2):
            for j in range(2):
                for k in range(j, 2):
                    val = 0.0
                    for m in range(2):
                        val = val + 0.5 * inv[(i, m)] * (dg(j, m, k) + dg(k, m, j) - dg(j, k, m))
                    G[..., i, j, k] = val
                    G[..., i, k, j] = val
        return G

    def geodesic_accel(self, x, y, vx, vy):
        """Coordinate acceleration -Gamma^i_{jk} v^j v^k of the geodesic equation."""
        if self.flat:
            return np.zeros_like(vx), np.zeros_like(vy)
        if self.kind == "conformal":
            _, lx, ly = self.lam.grad(x, y)
            vdl = vx * lx + vy * ly
            v2 = vx * vx + vy * vy
            return -2 * vx * vdl + v2 * lx, -2 * vy * vdl + v2 * ly
        G = self.christoffel(x, y)
        ax = -(G[..., 0, 0, 0] * vx * vx + 2 * G[..., 0, 0, 1] * vx * vy + G[..., 0, 1, 1] * vy * vy)
        ay = -(G[..., 1, 0, 0] * vx * vx + 2 * G[..., 1, 0, 1] * vx * vy + G[..., 1, 1, 1] * vy * vy)
        return ax, ay

    def connection(self, x, y, v, w):
        """Gamma^i_{jk} v^j w^k (trailing axis of length 2)."""
        v = np.asarray(v, float)
        w = np.asarray(w, float)
        if self.flat:
            return np.zeros(np.broadcast(v, w).shape)
        if self.kind == "conformal":
            _, lx, ly = self.lam.grad(x, y)
            dl = np.stack(np.broadcast_arrays(lx, ly), -1)
            vd = (v * dl).sum(-1)[..., None]
            wd = (w * dl).sum(-1)[..., None]
            vw = (v * w).sum(-1)[..., None]
            return v * wd + w * vd - vw * dl
        G = self.christoffel(x, y)
        return np.einsum("...ijk,...j,...k->...i", G, v, w)

    # curvature ------------------------------------------------------------
    def gauss_curvature(self, x, y=None):
        x, y = _as_xy(x, y)
        if self.kind == "conformal":
            j = self.lam.jet(x, y)
            return -np.exp(-2 * j.v) * (j.hxx + j.hyy)
        E, F, G = (gi.jet(x, y) for gi in self.g)
        return _brioschi(E, F, G)

    # rotations and frames -------------------------------------------------
    def rotate_perp(self, x, y, v):
        """v_perp with (v_perp)_i = eps_ij v^j, eps = sqrt(det g) [[0, 1], [-1, 0]]."""
        g11, g12, g22 = self.components(x, y)
        det = g11 * g22 - g12 ** 2
        if np.any(det <= 0):
            raise SingularMetricError("det g <= 0")
        v = np.asarray(v, float)
        sd = np.sqrt(det)
        w1, w2 = sd * v[..., 1], -sd * v[..., 0]
        return np.stack([(g22 * w1 - g12 * w2) / det, (-g12 * w1 + g11 * w2) / det], -1)

    def rotate_ccw(self, x, y, v):
        """Quarter turn in the frame orientation, ``-rotate_perp``."""
        return -self.rotate_perp(x, y, v)

    def frame(self, x, y=None):
        x, y = _as_xy(x, y)
        g11, g12, g22 = self.components(x, y)
        e1 = np.stack([1 / np.sqrt(g11), np.zeros_like(g11)], -1)
        e2 = self.rotate_ccw(x, y, e1)
        return e1, e2

    def unit_vector(self, x, y, beta):
        """Coordinate components of xi(beta) = cos(beta) e1 + sin(beta) e2."""
        x, y = _as_xy(x, y)
        g11, g12, g22 = self.components(x, y)
        det = g11 * g22 - g12 ** 2
        a = 1 / np.sqrt(g11)
        c, s = np.cos(beta), np.sin(beta)
        # e1 = (a, 0); e2 = (-a g12, a g11) / sqrt(det)
        sd = np.sqrt(det)
        vx = a * c - s * a * g12 / sd
        vy = s * a * g11 / sd
        return vx, vy

    def frame_angle(self, x, y, vx, vy):
        """Frame angle of the (not necessarily unit) vector v."""
        g11, g12, g22 = self.components(x, y)
        det = g11 * g22 - g12 ** 2
        a = 1 / np.sqrt(g11)
        # g(v, e1) = a (g11 vx + g12 vy); g(v, e2) = sqrt(det) * a * vy
        return np.arctan2(np.sqrt(det) * a * vy, a * (g11 * vx + g12 * vy))

    def speed(self, x, y, vx, vy):
        g11, g12, g22 = self.components(x, y)
        return np.sqrt(g11 * vx * vx + 2 * g12 * vx * vy + g22 * vy * vy)


def _brioschi(E, F, G):
    """Gaussian curvature from jets of E=g11, F=g12, G=g22."""
    Ex, Ey, Fx, Fy, Gx, Gy = E.gx, E.gy, F.gx, F.gy, G.gx, G.gy
    Evv, Guu, Fuv = E.hyy, G.hxx, F.hxy
    e, f, g = E.v, F.v, G.v
    a11 = -0.5 * Evv + Fuv - 0.5 * Guu
    m1 = np.array([
        [a11, 0.5 * Ex, Fx - 0.5 * Ey],
        [Fy - 0.5 * Gx, e, f],
        [0.5 * Gy, f, g],
    ])
    m2 = np.array([
        [np.zeros_like(e), 0.5 * Ey, 0.5 * Gx],
        [0.5 * Ey, e, f],
        [0.5 * Gx, f, g],
    ])
    m1 = np.moveaxis(m1, (0, 1), (-2, -1))
    m2 = np.moveaxis(m2, (0, 1), (-2, -1))
    det = e * g - f * f
    return (np.linalg.det(m1) - np.linalg.det(m2)) / det ** 2


@dataclass
class BoundaryChart:
    """Parametrisation of the circle ``|x| = radius`` by g-arclength ``s``.

    ``theta`` is the coordinate angle.  Arclength is computed by periodic
    spline quadrature on 4096 circle nodes.
    """

    metric: MetricField
    radius: float = 1.0
    length: float = field(init=False)

    def __post_init__(self):
        th = np.linspace(0.0, 2 * np.pi, ARC_NODES + 1)
        sig = self._speed(th)
        sig[-1] = sig[0]
        spl = CubicSpline(th, sig, bc_type="periodic")
        s = spl.antiderivative()(th)
        s -= s[0]
        self.length = float(s[-1])
        # theta(s) - 2 pi s / L is periodic
        k = 2 * np.pi / self.length
        self._theta_of_s = CubicSpline(s, th - k * s, bc_type="periodic")
        self._s_of_theta = CubicSpline(th, s - th / k, bc_type="periodic")
        self._k = k
        self.uniform = bool(np.ptp(sig) < 1e-13 * sig.max())

    def _speed(self, th):
        R = self.radius
        x, y = R * np.cos(th), R * np.sin(th)
        return self.metric.speed(x, y, -R * np.sin(th), R * np.cos(th))

    def theta(self, s):
        s = np.asarray(s, float)
        if self.uniform:
            return s * self._k
        L = self.length
        base = np.floor(s / L) * L
        return self._theta_of_s(s - base) + self._k * s

    def s_of_theta(self, theta):
        theta = np.asarray(theta, float)
        if self.uniform:
            return theta / self._k
        base = np.floor(theta / (2 * np.pi)) * 2 * np.pi
        return self._s_of_theta(theta - base) + theta / self._k

    def __call__(self, s):
        """Return (point, inner normal, unit tangent, ds/dtheta) at arclength s."""
        th = self.theta(s)
        return self.at_theta(th)

    def at_theta(self, th):
        th = np.asarray(th, float)
        R = self.radius
        x, y = R * np.cos(th), R * np.sin(th)
        sig = self._speed(th)
        T = np.stack([-R * np.sin(th) / sig, R * np.cos(th) / sig], -1)
        nu = self.metric.rotate_ccw(x, y, T)
        return np.stack([x, y], -1), nu, T, sig

    def second_fundamental_form(self, s):
        """B = g(D_s c', nu) for the unit-speed boundary curve, with nu the inner normal."""
        th = self.theta(s)
        R = self.radius
        x, y = R * np.cos(th), R * np.sin(th)
        d1 = np.stack([-R * np.sin(th), R * np.cos(th)], -1)
        d2 = np.stack([-x, -y], -1)
        acc = d2 + self.metric.connection(x, y, d1, d1)
        _, nu, _, sig = self.at_theta(th)
        return self.metric.inner(x, y, acc, nu) / sig ** 2

    def inward_vector(self, s, phi):
        """Coordinates (point, direction) of the inward unit vector at fiber angle phi."""
        p, nu, _, _ = self(s)
        R_nu = self.metric.rotate_ccw(p[..., 0], p[..., 1], nu)
        c, sn = np.cos(phi)[..., None], np.sin(phi)[..., None]
        return p, c * nu + sn * R_nu

    def angle_from_normal(self, th, v):
        """Signed angle of v measured from the inner normal at chart angle th, in (-pi, pi]."""
        th = np.asarray(th, float)
        R = self.radius
        x, y = R * np.cos(th), R * np.sin(th)
        _, nu, _, _ = self.at_theta(th)
        m = self.metric
        return -wrap_angle(m.frame_angle(x, y, nu[..., 0], nu[..., 1]) - m.frame_angle(x, y, v[..., 0], v[..., 1]))

    def fiber_phi(self, s, v):
        """Angle of the vector v at boundary point s, measured from nu (in (-pi, pi])."""
        p, nu, _, _ = self(s)
        x, y = p[..., 0], p[..., 1]
        m = self.metric
        return -wrap_angle(m.frame_angle(x, y, nu[..., 0], nu[..., 1]) - m.frame_angle(x, y, v[..., 0], v[..., 1]))


def boundary_chart(metric: MetricField, radius: float = 1.0) -> BoundaryChart:
    return BoundaryChart(metric, radius)


def christoffel(m: MetricField, x) -> np.ndarray:
    return m.christoffel(np.asarray(x, float))


def gauss_curvature(m: MetricField, x) -> float:
    return m.gauss_curvature(np.asarray(x, float))


def rotate_perp(m: MetricField, x, v) -> np.ndarray:
    x = np.asarray(x, float)
    return m.rotate_perp(x[..., 0], x[..., 1], v)


def second_fundamental_form(m: MetricField, s, xi=None) -> float:
    """B at boundary arclength s.  ``xi`` (the unit tangent) is implied; given only for the signature."""
    return BoundaryChart(m).second_fundamental_form(s)


def wrap_angle(a):
    """Map angles into [-pi, pi)."""
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi
