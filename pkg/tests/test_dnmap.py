import numpy as np
import pytest

from geotomo.bundle import scattering_relation
from geotomo.dnmap import (
    BoundaryTrace, DnConfig, DnOperator, PdeConfig, WEquation, dn_analytic_disk, dn_matrix_pde,
    ConformalBasis, InversionConfig, NonConvergenceError, conformal_factor_error,
    conjugate_pair_check, dn_pde, extract_dn, harmonic_extension, invert_conformal,
    linearized_travel_times, radial_pullback, solve_w_equation, subspace_error,
    w_equation_operator, w_equation_residual,
)
from geotomo.flow import FlowOptions, distance_matrix
from geotomo.geometry import BoundaryChart, MetricField
from geotomo.transport import IstarConfig, PolarGrid, ScalarField, istar, solve_istar

E = MetricField.euclidean()
INTERIOR = MetricField.conformal("(1-x^2-y^2)*(0.2+0.15*x-0.1*y^2)")   # lambda = 0 on the circle
TILTED = MetricField.conformal("0.1*x + 0.05*y^2")


def _trace(m, fn, ns=64):
    return BoundaryTrace.from_function(BoundaryChart(m), ns, fn)


# ------------------------------------------------------------------ traces


def test_trace_derivative_and_gauge():
    t = _trace(E, lambda th: 2 + np.sin(3 * th))
    assert np.allclose(t.derivative().values, 3 * np.cos(3 * t.theta), atol=1e-12)
    assert abs(t.mean() - 2) < 1e-14
    assert abs(t.mean_zero().mean()) < 1e-14


def test_trace_derivative_is_arclength_derivative():
    # on a non-uniform chart d/ds = (dtheta/ds) d/dtheta
    chart = BoundaryChart(TILTED)
    t = BoundaryTrace.from_function(chart, 128, np.cos)
    speed = np.exp(TILTED.lam(np.cos(t.theta), np.sin(t.theta)))
    assert np.allclose(t.derivative().values, -np.sin(t.theta) / speed, atol=1e-8)


# ------------------------------------------------------------------ analytic disk


@pytest.mark.parametrize("k", [0, 1, 3])
def test_analytic_disk(k):
    c, s = dn_analytic_disk(k, 32)
    th = c.theta
    assert np.allclose(c.values, k * np.cos(k * th), atol=1e-12)
    assert np.allclose(s.values, k * np.sin(k * th), atol=1e-12)


def test_harmonic_extension_reproduces_polynomials():
    t = _trace(E, lambda th: np.cos(2 * th) + 0.5 * np.sin(3 * th))
    x, y = np.array([0.1, -0.5, 0.3]), np.array([0.2, 0.1, -0.7])
    z = x + 1j * y
    assert np.allclose(harmonic_extension(t)(x, y), (z**2).real + 0.5 * (z**3).imag, atol=1e-12)


# ------------------------------------------------------------------ PDE route


@pytest.mark.parametrize("k", [1, 2, 4])
def test_conformal_route_with_unit_boundary_factor(k):
    t = _trace(INTERIOR, lambda th: np.cos(k * th))
    assert np.allclose(dn_pde(INTERIOR, t).values, k * np.cos(k * t.theta), atol=1e-10)


def test_finite_volume_euclidean():
    t = _trace(E, lambda th: np.sin(2 * th))
    got = dn_pde(E, t, PdeConfig(method="fd"))
    assert np.abs(got.values - 2 * np.sin(2 * t.theta)).max() < 1e-3


def test_richardson_improves_the_plain_solve():
    t = _trace(E, lambda th: np.cos(3 * th))
    want = 3 * np.cos(3 * t.theta)
    plain = dn_pde(E, t, PdeConfig(method="fd", richardson=False))
    rich = dn_pde(E, t, PdeConfig(method="fd"))
    assert np.abs(rich.values - want).max() < np.abs(plain.values - want).max() / 5


def test_finite_volume_agrees_with_conformal_invariance():
    # lambda is not zero on the circle here, so the boundary factor and the
    # non-uniform arclength chart both matter
    t = _trace(TILTED, lambda th: np.cos(th) + np.sin(2 * th) ** 2)
    a = dn_pde(TILTED, t)
    b = dn_pde(TILTED, t, PdeConfig(method="fd"))
    assert np.abs(a.values - b.values).max() < 1e-3 * np.abs(a.values).max()


def test_pullback_radial_map_is_boundary_fixing():
    m = radial_pullback(0.2)
    g = np.array(m.components(np.cos(0.7), np.sin(0.7)))
    assert np.allclose(g, [1, 0, 1], atol=1e-14)
    # the metric is the pullback of the Euclidean one: g(e_r, e_r) = rho'(r)^2
    r = 0.5
    rho_p = 1 + 0.2 * (1 - r**2) ** 2 - 0.8 * r**2 * (1 - r**2)
    g11, g12, g22 = m.components(r, 0.0)
    assert abs(g11 - rho_p**2) < 1e-12 and abs(g12) < 1e-15


@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_diffeomorphism_invariance(k):
    m = radial_pullback(0.2)
    for fn in (np.cos, np.sin):
        t = _trace(m, lambda th: fn(k * th))
        got = dn_pde(m, t)
        assert m.kind == "general"
        assert np.abs(got.values - k * t.values).max() < 1e-3


def test_pde_operator_invariants():
    op = dn_matrix_pde(radial_pullback(0.2), 32, PdeConfig(nr=24))
    assert isinstance(op, DnOperator)
    assert op.constant_leak() < 1e-6
    assert op.asymmetry() < 1e-4


# ------------------------------------------------------------------ boundary equation for w

SMALL = DnConfig(ns=32, nphi=16, s_modes=8, phi_modes=8)


@pytest.fixture(scope="module")
def interior_system():
    return WEquation(INTERIOR, DnConfig())


def test_trace_trigonometric_evaluation():
    t = _trace(INTERIOR, lambda th: np.cos(th) - 0.3 * np.sin(4 * th), ns=32)
    s = np.array([0.05, 1.234, 5.9])
    assert np.allclose(t(s), np.cos(s) - 0.3 * np.sin(4 * s), atol=1e-12)


def test_zero_data_gives_zero_w():
    sol = solve_w_equation(E, _trace(E, lambda th: 0 * th, 32), SMALL)
    assert np.all(sol.w.values == 0) and np.all(sol.h0.values == 0)


def test_euclidean_conjugate_of_sine():
    sol = solve_w_equation(E, _trace(E, np.sin, 32), SMALL)
    h0 = sol.h0.mean_zero()
    assert np.linalg.norm(h0.values - np.cos(h0.theta)) < 0.02 * np.linalg.norm(np.cos(h0.theta))
    assert sol.residual < 1e-8


def test_dense_operator_matches_matrix_free_route(interior_system):
    sysm = interior_system
    # smooth data: coefficients decay with the s wavenumber and the Legendre degree
    K, J = sysm.cfg.s_modes, sysm.cfg.phi_modes
    wave = np.concatenate([[0], np.repeat(np.arange(1, K + 1), 2)])
    decay = np.exp(-0.6 * (wave[:, None] + np.arange(J)[None, :])).ravel()
    c = np.random.default_rng(3).normal(size=sysm.nbasis) * decay
    w = sysm.w_grid(c)
    dense = sysm.apply(c)
    free = w_equation_operator(sysm.table, w).ravel()
    assert np.abs(dense - free).max() < 1e-3 * np.abs(dense).max()


def test_h0_is_the_boundary_trace_of_istar_w(interior_system):
    # 2 pi (A_+ w)_0 equals I^* w on the boundary; compare with the transport route
    # on the outermost ring of a fine radial grid
    sysm = interior_system
    sol = sysm.solve(_trace(INTERIOR, lambda th: np.sin(2 * th), sysm.cfg.ns))
    grid = PolarGrid(200, 32)
    ring = istar(sol.w, grid, nbeta=64, step=5e-3).values[-1]
    h0 = sol.h0(sysm.table.chart.s_of_theta(grid.theta))
    assert np.abs(ring - h0).max() < 2e-2 * np.abs(h0).max()


def test_conformal_extraction_recovers_the_conjugate(interior_system):
    sysm = interior_system
    for k in (1, 3):
        sol = sysm.solve(_trace(INTERIOR, lambda th: np.cos(k * th), sysm.cfg.ns))
        h0 = sol.h0.mean_zero()
        want = -np.sin(k * h0.theta)
        assert np.linalg.norm(h0.values - want) < 1e-2 * np.linalg.norm(want)
        assert sol.residual < sysm.cfg.residual_tol


def _modes(chart, ns, kmax):
    out = []
    for k in range(1, kmax + 1):
        out += [BoundaryTrace.from_function(chart, ns, lambda th, k=k: np.cos(k * th)),
                BoundaryTrace.from_function(chart, ns, lambda th, k=k: np.sin(k * th))]
    return out


def test_extracted_dn_euclidean():
    cfg = DnConfig(ns=32, nphi=16)
    basis = _modes(BoundaryChart(E), 32, 4)
    ex = extract_dn(E, basis, cfg)
    ref = [b.like(k * b.values) for b, k in zip(basis, np.repeat(np.arange(1, 5), 2))]
    assert subspace_error(ex.images, ref, basis) < 0.02
    assert not ex.failures


def test_extracted_dn_conformal(interior_system):
    basis = _modes(interior_system.table.chart, interior_system.cfg.ns, 4)
    ex = extract_dn(INTERIOR, basis, system=interior_system)
    ref = [b.like(k * b.values) for b, k in zip(basis, np.repeat(np.arange(1, 5), 2))]
    assert subspace_error(ex.images, ref, basis) < 0.03
    # self-adjoint and constant-free on the spanned subspace
    op = ex.operator
    assert op.constant_leak() < 1e-3
    P = np.stack([b.values for b in basis], 1)
    G = P.T @ op.matrix @ P
    assert np.linalg.norm(G - G.T, 2) < 1e-3 * np.linalg.norm(G, 2)


def test_constant_trace_gives_zero_column():
    ex = extract_dn(E, [_trace(E, lambda th: 1 + 0 * th, 32)], SMALL)
    assert np.abs(ex.images[0].values).max() < 1e-10


@pytest.mark.slow
def test_istar_solution_satisfies_the_boundary_equation():
    # h = Re z^2 is harmonic with conjugate Im z^2; the w constructed for h
    # must solve the boundary equation with right-hand side data Im z^2, and
    # the residual must fall as the solve for w is refined
    table = scattering_relation(E, 128, 128)
    h_star = _trace(E, lambda th: np.sin(2 * th), 128)
    res = []
    for grid, nb in (((32, 64), 48), ((48, 96), 64)):
        sol = solve_istar(E, "x^2 - y^2", IstarConfig(grid_n=grid, nbeta_n=nb))
        res.append(w_equation_residual(table, sol.w, h_star))
    assert res[1] < res[0] / 1.5 and res[1] < 1e-2


# ------------------------------------------------------------------ conjugate pairs


def test_conjugate_pair_euclidean():
    res, wrong = [], []
    for n in (12, 24):
        g = PolarGrid(n, 2 * n)
        h, hs = ScalarField.from_function(g, "x^2 - y^2"), ScalarField.from_function(g, "2*x*y")
        res.append(conjugate_pair_check(E, h, hs))
        wrong.append(conjugate_pair_check(E, h, ScalarField(g, -hs.values)))
    assert res[1] < res[0] / 3.5 and res[1] < 1e-3
    assert min(wrong) > 1.0


def test_conjugate_pair_is_conformally_invariant():
    g = PolarGrid(24, 48)
    h, hs = ScalarField.from_function(g, "x^3 - 3*x*y^2"), ScalarField.from_function(g, "3*x^2*y - y^3")
    wrong = conjugate_pair_check(TILTED, h, ScalarField(g, -hs.values))
    assert conjugate_pair_check(TILTED, h, hs) < 2e-3 * wrong


@pytest.mark.slow
def test_pipeline_pair_is_conjugate(interior_system):
    # h_* = x on a conformal disk; the boundary equation gives w, and I^* w must be
    # the conjugate harmonic function (-y up to a constant)
    sysm = interior_system
    sol = sysm.solve(_trace(INTERIOR, np.cos, sysm.cfg.ns))
    g = PolarGrid(12, 24)
    h = istar(sol.w, g, nbeta=64, step=5e-3)
    hs = ScalarField.from_function(g, "x")
    scale = conjugate_pair_check(INTERIOR, ScalarField.from_function(g, "0"), hs)
    assert conjugate_pair_check(INTERIOR, h, hs) < 2e-2 * scale
    assert conjugate_pair_check(INTERIOR, h, ScalarField(g, -hs.values)) > scale


# ------------------------------------------------------------------ inverse kinematics

GAUSS_LAM = "0.2*exp(-3*(x^2+y^2))"
FAST = FlowOptions(step=5e-3)


def test_basis_expression_matches_evaluation():
    b = ConformalBasis(6, 8)
    c = np.random.default_rng(0).normal(size=b.size) * 0.05
    x, y = np.array([0.1, -0.6, 0.3]), np.array([0.7, 0.2, -0.3])
    lam = MetricField.conformal(b.expression(c)).lam
    assert np.allclose(lam(x, y), b(x, y) @ c, atol=1e-13)
    z = x + 1j * y
    assert np.allclose(b(x, y)[:, b.index(1, "cos", 2)], x * (x**2 + y**2) ** 2, atol=1e-13)
    assert np.allclose(b(x, y)[:, b.index(3, "sin", 2)], (z**3).imag * (x**2 + y**2) ** 2, atol=1e-13)


def test_basis_metric_matches_expression_metric():
    b = ConformalBasis(6, 8)
    c = np.random.default_rng(1).normal(size=b.size) * 0.05
    fast, slow = b.metric(c), MetricField.conformal(b.expression(c))
    x, y = np.array([0.1, -0.6, 0.0]), np.array([0.7, 0.2, 0.0])
    jf, js = fast.lam.jet(x, y), slow.lam.jet(x, y)
    for k in ("v", "gx", "gy", "hxx", "hxy", "hyy"):
        assert np.allclose(getattr(jf, k), getattr(js, k), atol=1e-12)
    assert np.allclose(fast.geodesic_accel(x, y, x, y), slow.geodesic_accel(x, y, x, y), atol=1e-12)
    assert fast.hash == slow.hash


def test_linearization_matches_finite_differences():
    b = ConformalBasis(3, 4)
    th = np.arange(8) * 2 * np.pi / 8
    c = np.zeros(b.size)
    c[0] = 0.1
    c[b.index(1, "cos", 1)] = 0.05
    J = linearized_travel_times(b, c, th, FAST)
    i, j = np.triu_indices(8, 1)
    for q in (0, b.index(1, "sin", 0), b.index(1, "cos", 2)):
        e = np.zeros(b.size)
        e[q] = 1e-4
        up = distance_matrix(MetricField.conformal(b.expression(c + e)), th, FAST)[i, j]
        dn = distance_matrix(MetricField.conformal(b.expression(c - e)), th, FAST)[i, j]
        fd = (up - dn) / 2e-4
        assert np.abs(J[:, q] - fd).max() < 1e-6 * max(1, np.abs(fd).max())


def test_inversion_fixed_point():
    th = np.arange(24) * 2 * np.pi / 24
    D = 2 * np.abs(np.sin((th[:, None] - th[None, :]) / 2))
    res = invert_conformal(D)
    assert np.abs(res.coefficients).max() < 1e-8
    assert res.status == "converged"


def test_inversion_reports_non_convergence():
    th = np.arange(12) * 2 * np.pi / 12
    D = 2 * np.abs(np.sin((th[:, None] - th[None, :]) / 2)) * 1.3
    with pytest.raises(NonConvergenceError) as err:
        invert_conformal(D, InversionConfig(max_iter=1, stall=0.0))
    assert len(err.value.history) >= 1


@pytest.fixture(scope="module")
def gauss_data():
    th = np.arange(24) * 2 * np.pi / 24
    return distance_matrix(MetricField.conformal(GAUSS_LAM), th, FlowOptions(step=1e-3))


@pytest.mark.slow
def test_inversion_recovers_gaussian(gauss_data):
    res = invert_conformal(gauss_data)
    assert conformal_factor_error(res, GAUSS_LAM) < 0.05


@pytest.mark.slow
def test_inversion_with_noise(gauss_data):
    rng = np.random.default_rng(7)
    noise = rng.normal(size=gauss_data.shape)
    noisy = gauss_data * (1 + 1e-4 * (noise + noise.T) / np.sqrt(2))
    res = invert_conformal(noisy)
    assert conformal_factor_error(res, GAUSS_LAM) < 0.10
