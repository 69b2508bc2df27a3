import csv

import numpy as np
import pytest

from gnempc.apps.controllers import build_controller
from gnempc.apps.experiments import closed_loop, load_plant
from gnempc.rti import (ClosedLoopTrace, PerformanceLossError, performance_loss, rti_step, shift_guess,
                        simulate_closed_loop)
from gnempc.sqp import HessianStrategy, sqp_solve


@pytest.fixture(scope="module")
def small():
    return load_plant("evaporation", N=30, N_sim=15)


def trace(costs):
    costs = np.asarray(costs, float)
    n = costs.size
    return ClosedLoopTrace(np.zeros((n + 1, 1)), np.zeros((n, 1)), costs, np.zeros(n), ["optimal"] * n, 1.0)


def test_steady_state_is_fixed_point(small):
    ctrl = build_controller(small, "GN-RTI", small.ss.x)
    tr = simulate_closed_loop(small.ocp.dynamics, ctrl, small.ss.x, 5, small.meter)
    assert np.max(np.abs(tr.x - small.ss.x)) <= 1e-8
    assert np.max(np.abs(tr.u - small.ss.u)) <= 1e-8
    np.testing.assert_allclose(tr.stage_cost, small.ell_s, rtol=1e-10)


def test_shift_moves_stages(small):
    nlp = small.nlp(N=5)
    z = small.guess(nlp)
    X, U = nlp.split(z.w)
    X = X + np.arange(6)[:, None]
    U = U + np.arange(5)[:, None]
    z.w = nlp.join(X, U)
    Xs, Us = nlp.split(shift_guess(nlp, z, small.ss).w)
    np.testing.assert_array_equal(Xs[:5], X[1:])
    np.testing.assert_array_equal(Us[:4], U[1:])
    np.testing.assert_array_equal(Xs[5], small.ss.x)
    np.testing.assert_array_equal(Us[4], small.ss.u)


def test_performance_loss_arithmetic():
    base = trace([2.0, 2.0, 2.0, 2.0])
    worse = trace([2.0, 2.0, 3.0, 3.0])
    # (10 - 8) / (2 * 4) * 100
    assert performance_loss(worse, base, 2.0) == pytest.approx(25.0)
    assert performance_loss(base, base, 2.0) == 0.0
    # negative l(w_s) keeps the sign meaning with |l(w_s)|
    assert performance_loss(worse, base, -2.0) == pytest.approx(25.0)
    assert performance_loss(worse, base, -2.0, normalize_abs=False) == pytest.approx(-25.0)


def test_performance_loss_errors():
    with pytest.raises(PerformanceLossError):
        performance_loss(trace([1.0]), trace([1.0, 1.0]), 1.0)
    with pytest.raises(PerformanceLossError):
        performance_loss(trace([1.0]), trace([1.0]), 0.0)


def test_closed_loop_is_deterministic(small):
    a = closed_loop(small, "GN-RTI", 5.0)
    b = closed_loop(small, "GN-RTI", 5.0)
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.u, b.u)
    assert a.qp_status == b.qp_status


def test_closed_loop_csv(small, tmp_path):
    tr = closed_loop(small, "GN-RTI", 2.0)
    path = tmp_path / "cl.csv"
    tr.to_csv(path)
    rows = list(csv.DictReader(open(path)))
    assert len(rows) == tr.N_sim == 15
    assert list(rows[0])[:3] == ["k", "t", "x0"]
    assert float(rows[3]["stage_cost"]) == tr.stage_cost[3]


def test_shifted_guess_beats_cold_guess(small):
    x0 = small.ss.x + np.array([0.0, 5.0])
    ctrl = build_controller(small, "GN-RTI", x0)
    u, ctrl = rti_step(ctrl, x0)
    x1 = small.ocp.dynamics.f.eval(np.concatenate([x0, u]))
    nlp = ctrl.nlp.with_x0(x1)
    z_star, tr = sqp_solve(nlp, HessianStrategy.exact_regularized(), small.guess(nlp), tol=1e-9)
    assert tr.status == "converged"
    warm = np.linalg.norm(ctrl.guess.w - z_star.w)
    cold = np.linalg.norm(small.guess(nlp).w - z_star.w)
    assert warm < 0.5 * cold


def test_converged_controller_reports_kkt(small):
    x0 = small.ss.x + np.array([0.0, 2.0])
    ctrl = build_controller(small, "EMPC-converged", x0)
    tr = simulate_closed_loop(small.ocp.dynamics, ctrl, x0, 3, small.meter)
    assert tr.qp_status == ["converged"] * 3
    assert not tr.diverged
