import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geotomo.flow import FlowOptions, _boundary_start, integrate_batch
from geotomo.geometry import (
    BoundaryChart, MetricField, SingularMetricError, christoffel, gauss_curvature, rotate_perp,
    second_fundamental_form,
)

SPHERE = "-log(1 + (x^2 + y^2)/4)"
BUMP = "-0.3*exp(-2*(x^2+y^2))"


def _fd_christoffel(m, x, y, h=1e-5):
    """Christoffel symbols from central differences of the metric components."""
    def comps(a, b):
        return np.array(m.components(a, b), float)
    dx = (comps(x + h, y) - comps(x - h, y)) / (2 * h)
    dy = (comps(x, y + h) - comps(x, y - h)) / (2 * h)
    g11, g12, g22 = comps(x, y)
    g = np.array([[g11, g12], [g12, g22]])
    ginv = np.linalg.inv(g)
    d = np.zeros((2, 2, 2))  # d[c, a, b] = d_c g_ab
    for c, arr in enumerate((dx, dy)):
        d[c] = [[arr[0], arr[1]], [arr[1], arr[2]]]
    G = np.zeros((2, 2, 2))
    for i in range(2):
        for j in range(2):
            for k in range(2):
                G[i, j, k] = 0.5 * sum(ginv[i, l] * (d[k, j, l] + d[j, k, l] - d[l, j, k])
                                       for l in range(2))
    return G


def test_flat_christoffel_vanishes():
    assert np.all(christoffel(MetricField.euclidean(), [0.3, -0.2]) == 0)


@pytest.mark.parametrize("m", [MetricField.conformal(BUMP), MetricField.conformal("0.3*x - 0.2*y^2"),
                               MetricField.general("1+x^2", "0", "1"),
                               MetricField.general("1+0.2*y^2", "0.1*x*y", "1+0.3*x^2")])
def test_christoffel_matches_metric_differences(m):
    for x, y in [(0.5, 0.0), (0.1, -0.4), (-0.3, 0.6)]:
        G = christoffel(m, [x, y])
        assert np.allclose(G, _fd_christoffel(m, x, y), atol=1e-6)
        assert np.array_equal(G, np.swapaxes(G, -1, -2))


def test_conformal_christoffel_closed_form_equals_general():
    lam = "0.2*sin(x) + 0.1*x*y"
    a = MetricField.conformal(lam)
    b = MetricField.general(f"exp(2*({lam}))", "0", f"exp(2*({lam}))")
    for p in [(0.2, 0.3), (-0.5, 0.1)]:
        assert np.allclose(christoffel(a, p), christoffel(b, p), atol=1e-13)


@pytest.mark.parametrize("lam,K", [("0", 0.0), (SPHERE, 1.0), ("x", 0.0),
                                   ("log(1) - log(1 - 0.25*(x^2+y^2))", -1.0)])
def test_constant_curvature(lam, K):
    m = MetricField.conformal(lam)
    pts = np.array([[0.0, 0.0], [0.4, -0.3], [-0.7, 0.5]])
    assert np.allclose(gauss_curvature(m, pts), K, atol=1e-12)


def test_sphere_curvature_against_difference_laplacian():
    m = MetricField.conformal(SPHERE)
    h = 1e-4
    x, y = 0.3, 0.2
    lam = lambda a, b: float(m.lam(a, b))
    lap = (lam(x + h, y) + lam(x - h, y) + lam(x, y + h) + lam(x, y - h) - 4 * lam(x, y)) / h**2
    assert abs(-np.exp(-2 * lam(x, y)) * lap - 1.0) < 1e-6


def test_general_curvature_matches_conformal():
    lam = "0.3*x^2 - 0.1*y + 0.2*x*y"
    a = MetricField.conformal(lam)
    b = MetricField.general(f"exp(2*({lam}))", "0", f"exp(2*({lam}))")
    pts = np.random.default_rng(3).uniform(-0.6, 0.6, (20, 2))
    assert np.allclose(a.gauss_curvature(pts[:, 0], pts[:, 1]),
                       b.gauss_curvature(pts[:, 0], pts[:, 1]), atol=1e-10)


def test_pullback_of_flat_is_flat():
    # the pullback of the Euclidean metric by (u, v) -> (u + 0.2 u^2, v) is flat
    m = MetricField.general("(1 + 0.4*x)^2", "0", "1")
    pts = np.random.default_rng(0).uniform(-0.6, 0.6, (10, 2))
    assert np.allclose(m.gauss_curvature(pts[:, 0], pts[:, 1]), 0.0, atol=1e-12)


def test_rotate_perp_convention():
    E = MetricField.euclidean()
    assert np.allclose(rotate_perp(E, [0.1, 0.2], [1.0, 0.0]), [0.0, -1.0])
    assert np.allclose(rotate_perp(E, [0.1, 0.2], [0.0, 0.0]), 0.0)


@pytest.mark.parametrize("m", [MetricField.conformal("0.3"), MetricField.general("1+x^2", "0.3*x*y", "2+y")])
def test_rotate_perp_isometric_and_orthogonal(m):
    x, y = 0.2, 0.1
    v = np.array([1.0, 2.0])
    w = rotate_perp(m, [x, y], v)
    assert abs(m.inner(x, y, v, w)) < 1e-12
    assert abs(m.norm(x, y, w) - m.norm(x, y, v)) < 1e-12
    assert np.allclose(rotate_perp(m, [x, y], w), -v, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(-0.7, 0.7), st.floats(-0.7, 0.7))
def test_frame_orthonormal_and_positive(x, y):
    m = MetricField.general("1+0.5*x^2", "0.2*sin(x*y)", "1.5+0.3*y")
    e1, e2 = m.frame(x, y)
    assert abs(m.inner(x, y, e1, e1) - 1) < 1e-12
    assert abs(m.inner(x, y, e2, e2) - 1) < 1e-12
    assert abs(m.inner(x, y, e1, e2)) < 1e-12
    assert e1[0] * e2[1] - e1[1] * e2[0] > 0


def test_unit_vectors_have_unit_length():
    rng = np.random.default_rng(1)
    r = np.sqrt(rng.uniform(0, 1, 10_000))
    t = rng.uniform(0, 2 * np.pi, 10_000)
    x, y = r * np.cos(t), r * np.sin(t)
    beta = rng.uniform(-10, 10, 10_000)
    m = MetricField.general("1+0.5*x^2", "0.2*sin(x*y)", "1.5+0.3*y")
    vx, vy = m.unit_vector(x, y, beta)
    assert np.abs(m.speed(x, y, vx, vy) - 1).max() < 1e-12
    assert np.allclose(np.cos(m.frame_angle(x, y, vx, vy) - beta), 1.0)


def test_metric_compatibility_second_order():
    # central difference of g along a coordinate direction equals the
    # Christoffel combination; the residual shrinks like h^2
    m = MetricField.general("1+0.5*sin(2*x)^2", "0.2*sin(x+y)", "1.5+0.3*exp(x*y)")
    x, y = 0.3, -0.2
    G = christoffel(m, [x, y])
    g = m.matrix(x, y)
    errs = []
    for h in (1e-2, 5e-3):
        dg = (m.matrix(x + h, y) - m.matrix(x - h, y)) / (2 * h)
        # nabla_x g_ab = d_x g_ab - Gamma^l_xa g_lb - Gamma^l_xb g_al
        nab = dg - np.einsum("la,lb->ab", G[:, 0, :], g) - np.einsum("lb,al->ab", G[:, 0, :], g)
        errs.append(np.abs(nab).max())
    assert errs[1] < errs[0] / 3.5


def test_singular_metric_rejected():
    with pytest.raises(SingularMetricError):
        MetricField.general("1", "2", "1")


def test_euclidean_boundary_chart():
    c = BoundaryChart(MetricField.euclidean())
    assert abs(c.length - 2 * np.pi) < 1e-12
    s = np.linspace(0, 6, 7)
    p, nu, T, sig = c(s)
    assert np.allclose(p, np.stack([np.cos(s), np.sin(s)], -1))
    assert np.allclose(nu, -p)
    assert np.allclose(sig, 1.0)


def test_conformal_arclength_element():
    m = MetricField.conformal("0.2*x + 0.1*y^2")
    c = BoundaryChart(m)
    th = np.linspace(0, 2 * np.pi, 9)
    _, nu, _, sig = c.at_theta(th)
    assert np.allclose(sig, np.exp(m.lam(np.cos(th), np.sin(th))))
    assert np.allclose(m.norm(np.cos(th), np.sin(th), nu), 1.0)
    # inward: nu points towards smaller radius
    assert np.all(nu[:, 0] * np.cos(th) + nu[:, 1] * np.sin(th) < 0)
    # arclength parameter round trip
    s = np.linspace(-1, 2 * c.length, 13)
    assert np.allclose(c.s_of_theta(c.theta(s)), s, atol=1e-10)


def test_second_fundamental_form_circles():
    assert np.allclose(second_fundamental_form(MetricField.euclidean(), np.array([0.0, 1.0, 4.0])), 1.0)
    # the chart of a radius-2 circle: g = 4 |dx|^2
    big = MetricField.conformal("log(2)")
    assert np.allclose(second_fundamental_form(big, np.array([0.5, 3.0])), 0.5)
    assert abs(BoundaryChart(big).length - 4 * np.pi) < 1e-10


def test_second_fundamental_form_against_tangential_geodesics():
    # nearly tangential chords have length 2 eps / B + O(eps^3)
    m = MetricField.conformal("0.2*(1-x^2-y^2)")
    B = float(second_fundamental_form(m, np.array([0.3]))[0])
    est = []
    for eps in (0.02, 0.01):
        S = _boundary_start(m, np.array([0.3]), np.array([np.pi / 2 - eps]))
        tau = integrate_batch(m, S, FlowOptions(step=1e-4)).tau[0]
        est.append(2 * eps / tau)
    extrapolated = (4 * est[1] - est[0]) / 3
    assert abs(extrapolated - B) < 1e-5
    assert abs(B - 0.6) < 1e-10
