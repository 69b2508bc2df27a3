import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gnempc.apps.plants import ev_efficiency, ev_power, evaporation_model, ev_model
from gnempc.symbolic import DomainError, Function, symbols

from conftest import central_jacobian, rel_err


def p_loss():
    return Function.from_callable(
        "p_loss", lambda z: [0.0323 * z[1] * z[0] + 0.0183 * z[1] ** 2 + 0.0043 * z[0] ** 2], [("z", 2)])


def storage():
    return Function.from_callable("storage", lambda x: [100.0 * (x @ x)], [("x", 2)])


def test_p_loss_vanishes_at_rest():
    assert p_loss().eval(np.zeros(2))[0] == 0.0


def test_p_loss_unit_point():
    assert p_loss().eval(np.ones(2))[0] == pytest.approx(0.0549, abs=1e-15)


def test_rolling_drag_at_rest():
    drag = Function.from_callable("drag", lambda v: [0.45 * v[0] ** 2 + 1700.0 * 9.81 * 0.015], [("v", 1)])
    # 1700 * 9.81 * 0.015 by hand
    assert drag.eval(np.zeros(1))[0] == pytest.approx(250.155, abs=1e-9)


def test_identity_jacobian():
    f = Function("id", [("x", 3)], list(symbols(3)))
    np.testing.assert_array_equal(f.jacobian(np.array([0.3, -1.0, 2.0])), np.eye(3))


def test_storage_gradient():
    np.testing.assert_allclose(storage().jacobian(np.array([1.0, 0.0]))[0], [200.0, 0.0], atol=1e-12)


def test_linear_weighted_hessian_is_zero():
    f = Function.from_callable("lin", lambda x: [2 * x[0] - x[1], x[0] + 3 * x[1]], [("x", 2)])
    np.testing.assert_array_equal(f.weighted_hessian(np.array([1.0, 2.0]), np.array([0.7, -1.1])), np.zeros((2, 2)))


def test_storage_hessian():
    np.testing.assert_allclose(storage().weighted_hessian(np.array([0.4, -2.0]), np.ones(1)), 200 * np.eye(2),
                               atol=1e-12)


def test_tan_pole_reports_node():
    f = Function.from_callable("t", lambda x: [np.tan(x[0])], [("x", 1)])
    with pytest.raises(DomainError) as err:
        f.eval(np.array([np.pi / 2]))
    assert err.value.node >= 0


def test_log_domain():
    f = Function.from_callable("l", lambda x: [np.log(x[0])], [("x", 1)])
    with pytest.raises(DomainError):
        f.eval(np.array([-1.0]))


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        storage().eval(np.ones(3))


def test_vehicle_dynamics_jacobian_vs_differences(vehicle):
    fc = Function.from_callable("vehicle", lambda x, u: _vehicle_ode(x, u), [("x", 5), ("u", 3)])
    w = np.concatenate([vehicle.ss.x, vehicle.ss.u])
    J = fc.jacobian(w)
    assert rel_err(J, central_jacobian(fc.eval, w)) <= 1e-6


def _vehicle_ode(x, u):
    v, th, de = x[2], x[3], x[4]
    F_d = 0.45 * v * v + 1700.0 * 9.81 * 0.015
    return [v * np.cos(th), v * np.sin(th), (7.94 / 0.35 * u[0] - u[1] - F_d) / 1700.0, v * np.tan(de) / 4.8, u[2]]


def test_evaporation_weighted_hessian_vs_differences(evap):
    dyn, _, _ = evaporation_model()
    w = evap.ss.w
    lam = evap.ss.lam
    H = dyn.f.weighted_hessian(w, lam)
    fd = central_jacobian(lambda z: dyn.f.jacobian(z).T @ lam, w, h=1e-5)
    assert rel_err(H, fd) <= 1e-5


def _model_functions():
    dyn, cost, bounds = evaporation_model()
    vdyn, vcost, vbounds, _ = ev_model()
    return [(dyn.f, np.array([25.0, 49.743, 191.713, 215.888]), np.array([2.0, 5.0, 10.0, 10.0])),
            (cost, np.array([25.0, 49.743, 191.713, 215.888]), np.array([2.0, 5.0, 10.0, 10.0])),
            (bounds, np.array([25.0, 49.743, 191.713, 215.888]), np.array([2.0, 5.0, 10.0, 10.0])),
            (vdyn.f, np.array([0.0, 0.0, 13.9, 0.0, 0.0, 15.0, 0.0, 0.0]),
             np.array([5.0, 1.0, 3.0, 0.1, 0.1, 10.0, 50.0, 0.1])),
            (vcost, np.array([0.0, 0.0, 13.9, 0.0, 0.0, 15.0, 0.0, 0.0, 1.0, 80.0]),
             np.array([5.0, 1.0, 3.0, 0.1, 0.1, 10.0, 50.0, 0.1, 1.0, 0.0]))]


@pytest.mark.parametrize("k", range(5))
def test_model_jacobians_at_random_points(k):
    fn, c, r = _model_functions()[k]
    rng = np.random.default_rng(k)
    for _ in range(20):
        x = c + r * rng.uniform(-1, 1, c.size)
        assert rel_err(fn.jacobian(x), central_jacobian(fn.eval, x)) <= 1e-5


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3), st.lists(st.floats(-2, 2), min_size=2, max_size=2))
def test_weighted_hessian_linear_in_weight(x, w):
    f = Function.from_callable("g", lambda z: [np.sin(z[0]) * z[1] ** 2 + z[2] ** 3, np.exp(0.3 * z[0]) * z[2]],
                               [("z", 3)])
    x, w = np.array(x), np.array(w)
    parts = sum(w[i] * f.weighted_hessian(x, np.eye(2)[i]) for i in range(2))
    np.testing.assert_allclose(f.weighted_hessian(x, w), parts, rtol=1e-12, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=3, max_size=3))
def test_weighted_hessian_symmetric(x):
    f = Function.from_callable("g", lambda z: [z[0] * z[1] * np.cos(z[2]) + np.exp(z[0] * z[2])], [("z", 3)])
    H = f.weighted_hessian(np.array(x), np.ones(1))
    assert np.max(np.abs(H - H.T)) <= 1e-12 * max(1.0, np.max(np.abs(H)))


@settings(max_examples=40, deadline=None)
@given(st.floats(0.1, 280.0), st.floats(0.1, 1000.0))
def test_efficiency_identity(T, omega):
    assert abs(ev_efficiency(T, omega) * ev_power(T, omega) - omega * T) <= 1e-12 * max(1.0, omega * T)
