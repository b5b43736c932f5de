import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geotomo.flow import (
    EXITED, FlowOptions, LeavesDomainError, PhasePoint, _boundary_start, boundary_distance,
    boundary_distances, check_simple, distance_matrix, exit_times, exp_map, flow_for,
    integrate_batch, integrate_geodesic, jacobi_propagate, shoot, start_state, wronskian,
)
from geotomo.geometry import MetricField

E = MetricField.euclidean()
BUMP = MetricField.conformal("-0.3*exp(-2*(x^2+y^2))")
SPHERE = MetricField.conformal("-log(1 + (x^2 + y^2)/4)")
HYPERBOLIC = MetricField.conformal("log(1) - log(1 - 0.25*(x^2+y^2))")


def _chord_time(x, beta):
    xi = np.stack([np.cos(beta), np.sin(beta)], -1)
    xd = (x * xi).sum(-1)
    return -xd + np.sqrt(xd**2 + 1 - (x * x).sum(-1))


def test_origin_geodesic_exits_at_unit_time():
    geo = integrate_geodesic(E, PhasePoint(np.zeros(2), 0.0))
    assert geo.status == EXITED
    assert abs(geo.tau - 1) < 1e-12
    assert np.allclose(geo.exit.x, [1.0, 0.0], atol=1e-12)
    assert geo.states.shape[1] == 4 and geo.t[0] == 0.0


def test_euclidean_exit_times_match_chords():
    rng = np.random.default_rng(0)
    r = np.sqrt(rng.uniform(0, 0.9, 200))
    t = rng.uniform(0, 2 * np.pi, 200)
    x = np.stack([r * np.cos(t), r * np.sin(t)], -1)
    beta = rng.uniform(0, 2 * np.pi, 200)
    assert np.abs(exit_times(E, x, beta) - _chord_time(x, beta)).max() < 1e-9


def test_euclidean_distances_match_chords():
    assert abs(boundary_distance(E, 0.0, np.pi) - 2) < 1e-6
    assert abs(boundary_distance(E, 0.0, np.pi / 2) - np.sqrt(2)) < 1e-6
    th = np.linspace(0, 2 * np.pi, 12, endpoint=False)
    D = distance_matrix(E, th)
    assert np.abs(D - np.abs(2 * np.sin((th[:, None] - th[None, :]) / 2))).max() < 1e-6


def test_unit_speed_drift():
    for m in (E, BUMP):
        S0 = start_state(m, np.array([[0.2, -0.1], [-0.5, 0.3]]), np.array([0.4, 2.0]))
        res = integrate_batch(m, S0, FlowOptions(step=1e-3), record=True)
        for t, rows in res.trail:
            assert np.abs(m.speed(rows[:, 0], rows[:, 1], rows[:, 2], rows[:, 3]) - 1).max() < 1e-8


def test_exit_time_decreases_along_flow():
    # the derivative of tau along the flow is exactly -1
    S0 = start_state(BUMP, np.array([[0.1, 0.2]]), np.array([1.1]))
    tau0 = integrate_batch(BUMP, S0).tau[0]
    errs = []
    for dt in (0.04, 0.02):
        S1 = flow_for(BUMP, S0, dt)
        S2 = flow_for(BUMP, S0, -dt)
        tau1 = integrate_batch(BUMP, S1).tau[0]
        tau2 = integrate_batch(BUMP, S2).tau[0]
        errs.append(abs((tau1 - tau2) / (2 * dt) + 1))
        assert abs((tau1 - tau0) / dt + 1) < 1e-9
    assert max(errs) < 1e-9


def test_distance_symmetry_and_triangle():
    th = np.array([0.3, 1.9, 2.5, 4.4])
    D = distance_matrix(BUMP, th)
    d_rev = boundary_distances(BUMP, th[[1, 2, 3]], th[[0, 0, 0]])
    assert np.abs(D[0, 1:] - d_rev).max() < 1e-8
    for i in range(4):
        for j in range(4):
            for k in range(4):
                assert D[i, k] <= D[i, j] + D[j, k] + 1e-10


@pytest.mark.slow
def test_conformal_distance_against_dense_steps():
    d = boundary_distance(BUMP, 0.3, 2.5)
    dense = boundary_distance(BUMP, 0.3, 2.5, FlowOptions(step=1e-4))
    assert abs(d - dense) < 1e-6


def test_shooting_angle_reproduces_endpoint():
    tau, phi = shoot(BUMP, [0.3], [2.5])
    S0 = _boundary_start(BUMP, np.array([0.3]), phi)
    end = integrate_batch(BUMP, S0).state[0]
    assert np.allclose(end[:2], [np.cos(2.5), np.sin(2.5)], atol=1e-9)


def test_exp_map_round_trip():
    tau, phi = shoot(BUMP, [0.3], [2.5])
    S0 = _boundary_start(BUMP, np.array([0.3]), phi)[0]
    # a point slightly inside the start, flowed by the remaining length
    p = np.array([np.cos(0.3), np.sin(0.3)])
    y = exp_map(BUMP, p, (tau[0] - 1e-3) * S0[2:])
    q = flow_for(BUMP, S0[None, :], tau[0] - 1e-3)[0, :2]
    assert np.allclose(y, q, atol=1e-8)
    assert np.linalg.norm(y - [np.cos(2.5), np.sin(2.5)]) < 2e-3


def test_exp_map_trivial_cases():
    x = np.array([0.1, -0.2])
    assert np.array_equal(exp_map(BUMP, x, np.zeros(2)), x)
    assert np.allclose(exp_map(E, x, [0.3, 0.4]), x + [0.3, 0.4], atol=1e-12)
    with pytest.raises(LeavesDomainError):
        exp_map(E, x, [3.0, 0.0])


def test_flat_jacobi_is_linear():
    geo = integrate_geodesic(E, PhasePoint(np.array([-0.2, 0.1]), 0.7))
    jr = jacobi_propagate(E, geo, [0, 0], [0.3, -0.4])
    assert np.allclose(jr.J, jr.along.t[:, None] * np.array([0.3, -0.4]), atol=1e-12)


@pytest.mark.parametrize("m,fn", [(SPHERE, np.sin), (HYPERBOLIC, np.sinh)])
def test_constant_curvature_jacobi(m, fn):
    geo = integrate_geodesic(m, PhasePoint(np.array([-0.3, -0.2]), 0.3))
    n0 = m.rotate_ccw(-0.3, -0.2, geo.start[2:])
    jr = jacobi_propagate(m, geo, [0, 0], n0)
    st_ = jr.along.states
    assert np.abs(m.norm(st_[:, 0], st_[:, 1], jr.J) - fn(jr.along.t)).max() < 1e-6


_GEO = integrate_geodesic(HYPERBOLIC, PhasePoint(np.array([0.2, -0.3]), 2.1))


@settings(max_examples=10, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1))
def test_wronskian_constant(a, b, c, d):
    coarse = FlowOptions(step=4e-3)
    j1 = jacobi_propagate(HYPERBOLIC, _GEO, [a, b], [c, d], coarse)
    j2 = jacobi_propagate(HYPERBOLIC, _GEO, [c, -a], [d, b], coarse)
    assert np.ptp(wronskian(HYPERBOLIC, j1, j2)) < 1e-6


def test_simplicity_reports():
    rep = check_simple(E)
    assert rep.convex and rep.no_conjugate and not rep.trapped
    small = MetricField.conformal("log(0.1)")
    assert check_simple(small).simple
    # a round-sphere cap bigger than a hemisphere: conjugate point at distance pi
    cap = check_simple(MetricField.conformal("log(4) - log(1 + 4*(x^2+y^2))"))
    assert not cap.no_conjugate
    assert abs(cap.first_conjugate_time - np.pi) < 2e-2
