import numpy as np
import pytest

from conftest import central_jacobian, rel_err
from gnempc.convexify import (ConvexHessian, ConvexificationError, SteadyLinearization, reduced_hessian_check,
                              rotation_operator, solve_convexification, steady_hessians, verify_certificate)

# scalar system x+ = 0.5 x + u with an indefinite steady-state Hessian
A1, B1 = np.array([[0.5]]), np.array([[1.0]])
H1 = np.array([[-0.5, 0.4], [0.4, 1.0]])
HF1 = np.array([[1.0]])
# optimal beta of the scalar SDP from a grid search refined by Nelder-Mead on (alpha, dP)
BETA1 = 15.3264733816558


def unconstrained(A, B):
    nx, nu = np.shape(B)
    return SteadyLinearization(np.asarray(A), np.asarray(B), np.zeros((0, nx + nu)), np.zeros((0, nx)),
                               np.zeros(0, int), np.zeros(0, int))


def test_rotation_operator_zero():
    assert np.all(rotation_operator(np.zeros((2, 2)), np.eye(2), np.ones((2, 1))) == 0)


def test_rotation_operator_identity_dynamics():
    # A = I, B = 0: A'dP A - dP vanishes and so do the input blocks
    R = rotation_operator(np.diag([1.0, 2.0]), np.eye(2), np.zeros((2, 1)))
    assert np.all(R == 0)


def test_rotation_operator_matches_quadratic_form():
    # z'R z = (Ax+Bu)'dP(Ax+Bu) - x'dP x for every z = (x, u)
    rng = np.random.default_rng(0)
    A, B = rng.normal(size=(3, 3)), rng.normal(size=(3, 2))
    dP = rng.normal(size=(3, 3))
    dP = dP + dP.T
    R = rotation_operator(dP, A, B)
    for _ in range(10):
        x, u = rng.normal(size=3), rng.normal(size=2)
        xp = A @ x + B @ u
        z = np.concatenate([x, u])
        assert z @ R @ z == pytest.approx(xp @ dP @ xp - x @ dP @ x, rel=1e-12)


def test_scalar_indefinite_example():
    res = solve_convexification(H1, HF1, unconstrained(A1, B1))
    cert = res.certificate
    assert verify_certificate(cert)
    assert cert.beta == pytest.approx(BETA1, rel=1e-6)
    assert np.linalg.eigvalsh(res.M)[0] > 0
    assert np.linalg.eigvalsh(H1)[0] < 0
    assert min(cert.margins().values()) >= -1e-9


def test_not_dissipative_is_rejected():
    # with H12 = 0.2 no dP makes both diagonal entries of alpha H + R positive
    H = np.array([[-0.5, 0.2], [0.2, 1.0]])
    with pytest.raises(ConvexificationError):
        solve_convexification(H, HF1, unconstrained(np.array([[0.9]]), B1))


def test_tracking_hessian_needs_no_rotation():
    rng = np.random.default_rng(1)
    A, B = rng.normal(scale=0.5, size=(2, 2)), rng.normal(size=(2, 1))
    H = np.diag([10.0, 10.0, 0.1])
    res = solve_convexification(H, 5.0 * np.eye(2), unconstrained(A, B))
    assert verify_certificate(res.certificate)
    assert np.linalg.eigvalsh(res.M)[0] > 0
    # dP = 0 with alpha = 10 is feasible with beta = cond(H) = 100, so the optimum is no worse
    assert res.certificate.beta <= 100.0 + 1e-6


def test_shape_check():
    with pytest.raises(ValueError):
        solve_convexification(np.eye(3), HF1, unconstrained(A1, B1))


def test_steady_hessians_match_finite_differences(evap):
    ocp, ss = evap.ocp, evap.ss

    def grad(w):
        g = ocp.stage_cost.jacobian(w)[0] + ss.lam @ ocp.dynamics.f.jacobian(w)
        return g - ss.mu @ ocp.path_constraints.jacobian(w)
    H, _ = steady_hessians(ocp, ss)
    assert rel_err(H, central_jacobian(grad, ss.w, h=1e-5)) <= 1e-6
    np.testing.assert_allclose(H, evap.H, atol=1e-12)


def test_certificate_reverifies(evap, vehicle):
    for plant in (evap, vehicle):
        cert = plant.convex.certificate
        assert verify_certificate(cert)
        X = cert.stage_matrix()
        assert np.linalg.eigvalsh(X)[0] >= 1.0 - 1e-9
        assert np.linalg.eigvalsh(cert.terminal_matrix())[0] >= 1.0 - 1e-9
        np.testing.assert_allclose(plant.convex.M[np.ix_(*(2 * [np.r_[plant.convex.states,
                                   plant.ss.x.size + np.arange(plant.ss.u.size)]]))], X / cert.alpha,
                                   rtol=1e-12, atol=1e-12)


def test_evaporation_blocks_positive_definite(evap):
    assert np.linalg.eigvalsh(evap.convex.M)[0] > 0
    assert np.linalg.eigvalsh(evap.convex.M_f)[0] > 0


def test_vehicle_cyclic_state_block_is_zero(vehicle):
    assert list(vehicle.convex.states) == [1, 2, 3, 4]
    assert np.all(vehicle.convex.M[0] == 0) and np.all(vehicle.convex.M[:, 0] == 0)
    assert np.linalg.eigvalsh(vehicle.convex.M[1:, 1:])[0] > 0


def test_json_round_trip(evap, tmp_path):
    path = tmp_path / "convex.json"
    evap.convex.to_json(path)
    back = ConvexHessian.from_json(path.read_text())
    np.testing.assert_array_equal(back.M, evap.convex.M)
    np.testing.assert_array_equal(back.M_f, evap.convex.M_f)
    assert back.certificate.margins() == evap.convex.certificate.margins()
    assert verify_certificate(back.certificate)


@pytest.mark.parametrize("name", ["evap", "vehicle"])
def test_reduced_hessians_agree(name, request):
    plant = request.getfixturevalue(name)
    nlp = plant.nlp(N=20)
    z = plant.guess(nlp)
    ratio = reduced_hessian_check(nlp, plant.convex.blocks(20), nlp.lagrangian_hessian(z), plant.ss, z)
    assert ratio <= 1e-8


def test_reduced_hessian_check_detects_difference(evap):
    nlp = evap.nlp(N=20)
    z = evap.guess(nlp)
    blocks = evap.convex.blocks(20)
    wrong = type(blocks)(blocks.stage + np.eye(4), blocks.terminal)
    assert reduced_hessian_check(nlp, wrong, nlp.lagrangian_hessian(z), evap.ss, z) > 1e-3
