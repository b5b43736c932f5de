import numpy as np
import pytest

from geotomo.bundle import (
    BoundaryFiberGrid, a_minus, a_plus, a_star, euclidean_fold_jacobian, fold_diagnostic,
    fold_map, fold_scan, full_theta, odd_under_alpha, pullback_alpha, scattering_relation,
    transport_extend,
)
from geotomo.flow import flow_for, start_state
from geotomo.geometry import MetricField, wrap_angle

E = MetricField.euclidean()
SKEW = MetricField.conformal("0.15*x + 0.1*y^2 - 0.1*x*y")


@pytest.fixture(scope="module")
def flat_table():
    return scattering_relation(E, 32, 16)


@pytest.fixture(scope="module")
def skew_table():
    return scattering_relation(SKEW, 48, 24)


def _smooth_full(table, seed):
    """A band-limited function of (s, vartheta) on the full grid."""
    rng = np.random.default_rng(seed)
    c = rng.normal(size=(3, 3, 2))
    L = table.length

    def fn(s, vt):
        out = 0.0
        for a in range(3):
            for b in range(3):
                out = out + c[a, b, 0] * np.cos(2 * np.pi * a * s / L + b * vt) \
                    + c[a, b, 1] * np.sin(2 * np.pi * a * s / L + b * vt)
        return out

    return BoundaryFiberGrid.from_function(table.chart, table.ns, table.nphi, fn, "full")


# ------------------------------------------------------------------ scattering relation


def test_normal_entry_crosses_diameter(flat_table):
    # phi = 0 lies between nodes, so this goes through the table splines
    se, pe, tau = flat_table.exit(np.array([0.0]), np.array([0.0]))
    assert abs(tau[0] - 2) < 1e-4
    assert abs(wrap_angle(se[0] - np.pi)) < 1e-4 and abs(pe[0]) < 1e-4


def test_euclidean_table_is_the_chord_map(flat_table):
    S, P = np.meshgrid(flat_table.s, flat_table.phi, indexing="ij")
    assert np.abs(wrap_angle(flat_table.s_exit - (S + np.pi + 2 * P))).max() < 1e-9
    assert np.abs(flat_table.tau - 2 * np.cos(P)).max() < 1e-9
    assert np.abs(flat_table.p_exit - P).max() < 1e-9


def test_records_carry_every_node(flat_table):
    rec = flat_table.records()
    assert len(rec) == 32 * 16
    assert set(rec[0]) == {"s", "phi", "s_exit", "phi_exit", "tau"}


def test_scattering_involution_converges():
    errs, hs = [], []
    for n in (16, 32):
        errs.append(scattering_relation(SKEW, n, n // 2).involution_error())
        hs.append(2 * np.pi / n)
    assert all(e < 5 * h**2 for e, h in zip(errs, hs))
    # at least second order in the grid spacing (bicubic splines deliver more)
    assert errs[0] / errs[1] > 3.5


@pytest.mark.slow
def test_scattering_involution_fine_grid():
    assert scattering_relation(SKEW, 128, 64).involution_error() < 1e-6


def test_full_chart_alpha_is_an_involution(skew_table):
    rng = np.random.default_rng(4)
    s = rng.uniform(0, skew_table.length, 200)
    vt = rng.uniform(-np.pi, np.pi, 200)
    vt = vt[np.abs(np.cos(vt)) > 0.1]
    s = s[: vt.size]
    s1, v1 = skew_table.alpha_full(s, vt)
    s2, v2 = skew_table.alpha_full(s1, v1)
    L = skew_table.length
    assert np.abs(wrap_angle((s2 - s) * 2 * np.pi / L)).max() < 1e-3
    assert np.abs(wrap_angle(v2 - vt)).max() < 1e-3


# ------------------------------------------------------------------ measures and pullback


def test_cosine_weight_integrates_to_four_per_point(flat_table):
    one = BoundaryFiberGrid.from_function(flat_table.chart, 32, 16, lambda s, v: 1.0, "full")
    per_point = one.integral(mask=False) / flat_table.length
    assert abs(per_point - 4) < 1e-2
    # midpoint rule error on |cos|: second order
    fine = BoundaryFiberGrid.from_function(flat_table.chart, 8, 128, lambda s, v: 1.0, "full")
    assert abs(fine.integral(mask=False) / flat_table.length - 4) < abs(per_point - 4) / 30


def test_alpha_preserves_the_measure(skew_table):
    for seed in range(20):
        u = _smooth_full(skew_table, seed)
        a = pullback_alpha(skew_table, u)
        ref = u.integral(mask=False)
        assert abs(a.integral(mask=False) - ref) < 1e-3 * max(1.0, abs(ref))


def test_pullback_of_constant_and_double_pullback(skew_table):
    one = BoundaryFiberGrid.from_function(skew_table.chart, 48, 24, lambda s, v: 1.0, "full")
    assert np.allclose(pullback_alpha(skew_table, one).values, 1.0, atol=1e-12)
    u = _smooth_full(skew_table, 7)
    back = pullback_alpha(skew_table, pullback_alpha(skew_table, u))
    keep = np.abs(np.cos(full_theta(24))) > 0.2
    assert np.abs(back.values[:, keep] - u.values[:, keep]).max() < 1e-3 * np.abs(u.values).max()


def test_bump_moves_to_the_alpha_image(skew_table):
    i, j = 5, 8   # an inward node
    se, pe = skew_table.s_exit[i, j], skew_table.p_exit[i, j]
    L = skew_table.length

    def bump(s, vt):
        ds = wrap_angle((s - se) * 2 * np.pi / L) * L / (2 * np.pi)
        dv = wrap_angle(vt - (np.pi - pe))
        return np.exp(-(ds**2 + dv**2) / 0.3**2)

    u = BoundaryFiberGrid.from_function(skew_table.chart, 48, 24, bump, "full")
    a = pullback_alpha(skew_table, u)
    n = skew_table.nphi
    assert abs(a.values[i, n // 2 + j] - 1.0) < 5e-3


# ------------------------------------------------------------------ continuation operators


def test_continuations_of_one(skew_table):
    w = BoundaryFiberGrid.from_function(skew_table.chart, 48, 24, lambda s, p: 1.0)
    assert np.allclose(a_plus(skew_table, w).values, 1.0)
    am = a_minus(skew_table, w)
    inward = np.abs(full_theta(24)) < np.pi / 2
    assert np.allclose(am.values[:, inward], 1.0) and np.allclose(am.values[:, ~inward], -1.0)
    one = a_plus(skew_table, w)
    assert np.allclose(a_star(skew_table, one, +1).values, 2.0)
    assert np.allclose(a_star(skew_table, one, -1).values, 0.0)


def test_odd_continuation_of_exit_time(skew_table):
    w = BoundaryFiberGrid(skew_table.chart, skew_table.tau, "inward")
    am = a_minus(skew_table, w)
    # on the outward side the value is -tau of the inward vector alpha sends it to
    out = am.outward_part()
    assert np.allclose(out, -_tau_of_alpha(skew_table), atol=1e-4)


def _tau_of_alpha(table):
    S, P = np.meshgrid(table.s, table.phi, indexing="ij")
    s_in, phi_in = table.alpha_outward(S, P)
    return table.exit(s_in, phi_in)[2]


def test_a_plus_adjointness(skew_table):
    rng = np.random.default_rng(2)
    L = skew_table.length
    for seed in range(3):
        c = rng.normal(size=3)
        w = BoundaryFiberGrid.from_function(
            skew_table.chart, 48, 24,
            lambda s, p: c[0] + c[1] * np.cos(2 * np.pi * s / L) * np.cos(p) + c[2] * np.sin(p))
        u = _smooth_full(skew_table, seed + 30)
        lhs = a_plus(skew_table, w).inner(u, mask=False)
        rhs = w.inner(a_star(skew_table, u, +1), mask=False)
        assert abs(lhs - rhs) < 1e-4 * max(1.0, abs(lhs))


def test_odd_functions_are_annihilated():
    # the cancellation f - f o alpha o alpha is exact up to the interpolated involution
    res = []
    for n in (24, 48):
        t = scattering_relation(SKEW, n, n // 2)
        f = _smooth_full(t, 11)
        u = odd_under_alpha(t, f)
        res.append(np.abs(a_star(t, u, +1).values).max() / np.abs(f.values).max())
    assert res[1] < 1e-3 and res[1] < res[0] / 4


def _glancing_second_differences(table, w):
    """Largest second difference in vartheta of A+ w over stencils straddling +-pi/2."""
    full = a_plus(table, w).values
    n = table.nphi
    h = np.pi / n
    worst = 0.0
    for j in (n // 2 - 1, n // 2, n // 2 + n - 1, (n // 2 + n) % (2 * n)):
        c = full[:, (np.array([-1, 0, 1]) + j) % (2 * n)]
        worst = max(worst, np.abs(c[:, 0] - 2 * c[:, 1] + c[:, 2]).max() / h**2)
    return worst


def test_odd_continuation_smoothness_proxy():
    # w = v o phi (phi the exit map into the enlarged disk) continues smoothly;
    # a phi-independent w does not: its continuation has a kink at glancing
    good, bad = [], []
    for n in (32, 64):
        t = scattering_relation(SKEW, n, n // 2)
        S, P = np.meshgrid(t.s, t.phi, indexing="ij")
        sN, pN, LN = fold_map(SKEW, S, P, delta=0.2)
        v = np.cos(2 * np.pi * sN / LN) * (1 + 0.5 * np.sin(pN))
        good.append(_glancing_second_differences(t, BoundaryFiberGrid(t.chart, v.reshape(S.shape))))
        L = t.length
        w = BoundaryFiberGrid.from_function(t.chart, n, n // 2, lambda s, p: np.cos(2 * np.pi * s / L))
        bad.append(_glancing_second_differences(t, w))
    assert good[1] < 1.1 * good[0]
    assert bad[1] > 1.7 * bad[0]
    assert bad[1] > 3 * good[1]


# ------------------------------------------------------------------ transport


def test_transport_of_constant(skew_table):
    w = BoundaryFiberGrid.from_function(skew_table.chart, 48, 24, lambda s, p: 3.5)
    v = transport_extend(w, [0.1, -0.4], [0.2, 0.5], [0.3, 4.0])
    assert np.allclose(v, 3.5)


def test_transport_matches_chord_entry(flat_table):
    w = BoundaryFiberGrid.from_function(flat_table.chart, 32, 16, lambda s, p: np.cos(s) + 0.3 * np.sin(p))
    rng = np.random.default_rng(0)
    r, a = np.sqrt(rng.uniform(0, 0.8, 50)), rng.uniform(0, 2 * np.pi, 50)
    x, y, b = r * np.cos(a), r * np.sin(a), rng.uniform(0, 2 * np.pi, 50)
    v = transport_extend(w, x, y, b)
    X = np.stack([x, y], -1)
    xi = np.stack([np.cos(b), np.sin(b)], -1)
    xd = (X * xi).sum(-1)
    q = X - (xd + np.sqrt(xd**2 + 1 - (X * X).sum(-1)))[:, None] * xi
    th = np.arctan2(q[:, 1], q[:, 0])
    phi = flat_table.chart.angle_from_normal(th, xi)
    assert np.abs(v - (np.cos(th) + 0.3 * np.sin(phi))).max() < 1e-4


def test_transported_function_is_flow_invariant(skew_table):
    L = skew_table.length
    w = BoundaryFiberGrid.from_function(skew_table.chart, 48, 24,
                                        lambda s, p: np.sin(2 * np.pi * s / L) * np.cos(p) + p)
    X = np.array([[0.1, 0.2], [-0.3, -0.1]])
    B = np.array([0.7, 2.2])
    S0 = start_state(SKEW, X, B)
    dt = 0.05
    vals = []
    for sgn in (1, -1):
        S = flow_for(SKEW, S0, sgn * dt)
        beta = SKEW.frame_angle(S[:, 0], S[:, 1], S[:, 2], S[:, 3])
        vals.append(transport_extend(w, S[:, 0], S[:, 1], beta))
    assert np.abs((vals[0] - vals[1]) / (2 * dt)).max() < 1e-3


# ------------------------------------------------------------------ fold


def test_euclidean_fold_jacobian_closed_form():
    vt = np.array([0.0, 1.0, 1.5, 2.0, -1.4, 3.0])
    rep = fold_diagnostic(E, 0.7, vt)
    assert np.abs(rep.jacobians - euclidean_fold_jacobian(vt)).max() < 1e-6


def test_normal_entry_is_not_folded():
    rep = fold_diagnostic(SKEW, [0.4, 2.9], [0.0, 0.0])
    assert rep.singular_values.min() > 0.1


@pytest.mark.parametrize("side", [1, -1])
def test_rank_drops_linearly_at_glancing(side):
    sc = fold_scan(SKEW, 0.4, side)
    assert sc.r_squared > 0.99
    assert abs(sc.intercept) < 0.01 and sc.slope > 0.1
    assert sc.sigma_max.min() > 0.1
