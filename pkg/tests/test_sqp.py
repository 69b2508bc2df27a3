import csv

import numpy as np
import pytest

from gnempc.integrator import DiscreteDynamics
from gnempc.qpsolver import BlockDiagonal
from gnempc.sqp import (CONVERGED, HessianStrategy, compare_iterates, exact_lagrangian_hessian, regularize,
                        sqp_solve)
from gnempc.symbolic import Function
from gnempc.transcription import NlpIterate, OcpSpec, build_nlp

X0 = np.array([35.0, 49.743])


def boxed_lq(N=5):
    dyn = DiscreteDynamics.from_callable(lambda x, u: [x[0] + 0.1 * x[1], x[1] + 0.1 * u[0]], 2, 1)
    cost = Function.from_callable("lq", lambda x, u: [x @ x + 0.1 * u[0] ** 2], [("x", 2), ("u", 1)])
    box = Function.from_callable("box", lambda x, u: [1.0 - u[0], 1.0 + u[0]], [("x", 2), ("u", 1)])
    term = Function.from_callable("vf", lambda x: [10.0 * (x @ x)], [("x", 2)])
    return build_nlp(OcpSpec(N, dyn, cost, box, term), [3.0, 0.0])


def cold(nlp):
    return NlpIterate(np.zeros(nlp.n_w), np.zeros((nlp.N + 1, nlp.n_x)), np.zeros((nlp.N, nlp.n_h)),
                      np.zeros(nlp.ocp.n_g))


def test_convex_qp_solved_in_one_iteration():
    nlp = boxed_lq()
    z, tr = sqp_solve(nlp, HessianStrategy.exact(), cold(nlp), tol=1e-10)
    assert tr.status == CONVERGED
    assert tr.n_iter == 1
    U = nlp.split(z.w)[1]
    assert np.min(U) >= -1.0 - 1e-12
    assert np.isclose(np.min(U), -1.0)  # the input bound is active for this x0


def test_regularize_floors_eigenvalues():
    B = np.diag([-2.0, 0.0, 3.0])
    R = regularize(B, 1e-3)
    np.testing.assert_allclose(np.linalg.eigvalsh(R), [1e-3, 1e-3, 3.0], atol=1e-14)
    blocks = regularize(BlockDiagonal(np.stack([B, -B]), np.array([[-1.0]])), 0.5)
    assert all(np.linalg.eigvalsh(b)[0] >= 0.5 - 1e-14 for b in blocks.blocks())
    # positive definite blocks pass through
    np.testing.assert_allclose(regularize(np.diag([1.0, 2.0])), np.diag([1.0, 2.0]), atol=1e-14)


def test_exact_hessian_at_steady_state(evap):
    nlp = evap.nlp(N=10)
    blocks = exact_lagrangian_hessian(nlp, evap.guess(nlp))
    for b in blocks.stage:
        np.testing.assert_allclose(b, evap.H, atol=1e-10)
    np.testing.assert_allclose(blocks.terminal, evap.H_f, atol=1e-10)


@pytest.fixture(scope="module")
def strategy_runs(evap):
    nlp = evap.nlp(X0)
    out = {}
    for name, strat in {"exact": HessianStrategy.exact_regularized(),
                        "gn": HessianStrategy.gauss_newton_empc(evap.convex)}.items():
        out[name] = sqp_solve(nlp, strat, evap.guess(nlp), tol=1e-9, max_iter=50)
    return nlp, out


def test_strategies_share_the_solution(strategy_runs):
    _, runs = strategy_runs
    (za, ta), (zb, tb) = runs["exact"], runs["gn"]
    assert ta.status == tb.status == CONVERGED
    assert np.linalg.norm(za.w - zb.w) <= 1e-7


def test_exact_converges_faster(strategy_runs):
    _, runs = strategy_runs
    assert runs["exact"][1].n_iter <= runs["gn"][1].n_iter


def test_identity_is_slow(evap):
    nlp = evap.nlp(X0)
    _, tr = sqp_solve(nlp, HessianStrategy.identity(), evap.guess(nlp), tol=1e-9, max_iter=20)
    assert tr.status != CONVERGED


def test_trace_csv(strategy_runs, tmp_path):
    _, runs = strategy_runs
    tr = runs["gn"][1]
    path = tmp_path / "trace.csv"
    tr.to_csv(path)
    rows = list(csv.DictReader(open(path)))
    assert list(rows[0]) == ["iteration", "kkt_inf_norm", "step_norm", "t"]
    assert len(rows) == len(tr.kkt)
    assert float(rows[-1]["kkt_inf_norm"]) == pytest.approx(tr.kkt[-1])


def test_line_search_reaches_same_point(evap, strategy_runs):
    nlp, runs = strategy_runs
    z, tr = sqp_solve(nlp, HessianStrategy.gauss_newton_empc(evap.convex), evap.guess(nlp), tol=1e-9,
                      max_iter=50, line_search=True)
    assert tr.status == CONVERGED
    assert np.linalg.norm(z.w - runs["gn"][0].w) <= 1e-7


def test_compare_iterates_identical_problems(evap):
    nlp = evap.nlp(X0, N=20)
    z0 = evap.guess(nlp)
    cmp = compare_iterates(nlp, nlp, HessianStrategy.gauss_newton_empc(evap.convex), z0, z0, 3)
    assert cmp.primal_gap.shape == (3,)
    assert np.all(cmp.primal_gap == 0) and np.all(cmp.dual_gap == 0)


def test_iterate_dimension_checked(evap):
    nlp = evap.nlp()
    z = evap.guess(nlp)
    with pytest.raises(ValueError):
        sqp_solve(nlp, HessianStrategy.exact(), NlpIterate(z.w[:-1], z.lam, z.mu, z.nu))


def linear_rotation_pair(N=10, weight=5.0):
    from gnempc.apps.plants import RotationPair
    from gnempc.transcription import StorageFunction, rotate, solve_sop

    dyn = DiscreteDynamics.from_callable(lambda x, u: [0.5 * x[0] + u[0]], 1, 1)
    track = Function.from_callable("track", lambda x, u: [(x[0] - 1.0) ** 2 + (u[0] - 0.5) ** 2],
                                   [("x", 1), ("u", 1)])
    box = Function.from_callable("box", lambda x, u: [2.0 - u[0], 2.0 + u[0]], [("x", 1), ("u", 1)])
    ss = solve_sop(track, dyn, box)
    store = StorageFunction(Function.from_callable("L", lambda x: [weight * x[0] ** 2], [("x", 1)]), ss.x)
    neg = StorageFunction(Function.from_callable("nL", lambda x: [-weight * x[0] ** 2], [("x", 1)]), ss.x)
    original = rotate(OcpSpec(N, dyn, track, box), neg)
    return RotationPair(original, rotate(original, store), store, ss, -store.gradient(ss.x))


def test_gauss_newton_iterates_coincide_without_defects():
    # linear dynamics close every shooting defect after the first step, so the rotation terms telescope
    rp = linear_rotation_pair()
    na, nb = rp.nlps([3.0])
    cmp = compare_iterates(na, nb, HessianStrategy.gauss_newton_empc(rp.convexify()), rp.primal_guess(na),
                           rp.primal_guess(nb), 20, tol=1e-10)
    assert cmp.trace_a.status == CONVERGED
    assert np.max(cmp.primal_gap) <= 1e-9
