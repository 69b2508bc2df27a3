import numpy as np
import pytest

from gnempc.apps.plants import evaporation_rotation_pair
from gnempc.integrator import DiscreteDynamics
from gnempc.sqp import HessianStrategy, sqp_solve
from gnempc.symbolic import Function
from gnempc.transcription import (NlpIterate, OcpSpec, StorageFunction, build_nlp, kkt_residual, rotate,
                                  solve_sop, steady_iterate)

X0 = np.array([35.0, 49.743])


def lq_problem(N=1):
    dyn = DiscreteDynamics.from_callable(lambda x, u: [0.5 * x[0] + u[0]], 1, 1)
    cost = Function.from_callable("lq", lambda x, u: [x[0] ** 2 + u[0] ** 2], [("x", 1), ("u", 1)])
    return OcpSpec(N, dyn, cost)


@pytest.fixture(scope="module")
def rotation(evap):
    pair = evaporation_rotation_pair(evap)
    na, nb = pair.nlps(X0)
    za, ta = sqp_solve(na, HessianStrategy.exact_regularized(), pair.primal_guess(na), tol=1e-10, max_iter=100)
    zb, tb = sqp_solve(nb, HessianStrategy.exact_regularized(), pair.primal_guess(nb), tol=1e-10, max_iter=100)
    assert ta.status == tb.status == "converged"
    return pair, na, nb, za, zb


def test_single_stage_structure():
    nlp = build_nlp(lq_problem(1), [1.0])
    assert nlp.n_w == 3
    assert nlp.n_eq == 2
    assert nlp.n_in == 0


def test_plant_dimensions(evap, vehicle):
    assert evap.nlp().n_w == 802
    assert vehicle.nlp().n_w == 805


def test_x0_dimension_checked(evap):
    with pytest.raises(ValueError):
        evap.nlp(np.ones(3))


def test_quadratic_nlp_at_minimizer():
    # x0 = 0 fixes the state; the minimizer is the zero trajectory
    nlp = build_nlp(lq_problem(3), [0.0])
    z = NlpIterate(np.zeros(nlp.n_w), np.zeros((4, 1)), np.zeros((3, 0)), np.zeros(0))
    assert kkt_residual(nlp, z).inf_norm == 0.0


def test_steady_state_is_ocp_fixed_point(evap):
    nlp = evap.nlp()
    assert kkt_residual(nlp, evap.guess(nlp)).inf_norm <= 1e-8


def test_lq_steady_state_at_origin():
    ocp = lq_problem()
    ss = solve_sop(ocp.stage_cost, ocp.dynamics, guess=([1.0], [1.0]))
    np.testing.assert_allclose(ss.w, [0.0, 0.0], atol=1e-10)


def test_evaporation_steady_state(evap):
    np.testing.assert_allclose(evap.ss.w, [25.0, 49.743, 191.713, 215.888], atol=1e-3)


def test_steady_state_invariants(evap):
    ss = evap.ss
    assert np.max(np.abs(ss.x - evap.ocp.dynamics.f.eval(ss.w))) <= 1e-10
    assert ss.kkt <= 1e-10
    h = evap.ocp.path_constraints.eval(ss.w)
    assert np.max(np.abs(ss.mu * h)) <= 1e-10
    assert np.all(ss.mu >= 0)


def test_vehicle_cruise(vehicle):
    from gnempc.apps.plants import EV_PARAMETERS as p
    ss = vehicle.ss
    assert ss.x[2] == pytest.approx(50 / 3.6, rel=1e-2)
    drag = p["Cd"] * ss.x[2] ** 2 + p["m"] * p["g"] * p["Cr"]
    assert p["Gr"] / p["r"] * ss.u[0] - ss.u[1] == pytest.approx(drag, rel=1e-8)


def test_storage_vanishes_at_steady_state(evap):
    fn = Function.from_callable("s", lambda x: [100.0 * (x @ x) + 3.0 * x[0]], [("x", 2)])
    assert abs(StorageFunction(fn, evap.ss.x)(evap.ss.x)) <= 1e-12


def test_zero_storage_rotation_is_identical(evap):
    rot = rotate(evap.ocp, StorageFunction.zero(2, evap.ss.x))
    rng = np.random.default_rng(0)
    for _ in range(5):
        w = evap.ss.w + rng.normal(size=4)
        assert rot.stage_cost.eval(w)[0] == evap.ocp.stage_cost.eval(w)[0]


def test_rotated_cost_offset(rotation):
    pair, na, nb, za, zb = rotation
    assert nb.evaluate(zb.w)[0] - na.evaluate(za.w)[0] == pytest.approx(pair.storage(X0), rel=1e-9)


def test_primal_solutions_coincide(rotation):
    _, _, _, za, zb = rotation
    assert np.linalg.norm(za.w - zb.w) <= 1e-7


def test_dual_rotation(rotation):
    pair, na, _, za, zb = rotation
    X, _ = na.split(za.w)
    grad = np.array([pair.storage.gradient(x) for x in X])
    assert np.max(np.abs(zb.lam - za.lam - grad)) <= 1e-6
    assert np.max(np.abs(zb.mu - za.mu)) <= 1e-6
    assert np.max(np.abs(zb.nu - za.nu)) <= 1e-6


def test_steady_iterate_constant_trajectory(evap):
    nlp = evap.nlp(N=5)
    z = steady_iterate(nlp, evap.ss)
    X, U = nlp.split(z.w)
    np.testing.assert_array_equal(X, np.tile(evap.ss.x, (6, 1)))
    np.testing.assert_array_equal(U, np.tile(evap.ss.u, (5, 1)))
