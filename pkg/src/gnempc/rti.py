"""Real-time iteration controller and closed-loop simulation."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .integrator import DiscreteDynamics
from .qpsolver import NONCONVEX, OPTIMAL
from .sqp import CONVERGED, HessianStrategy, qp_step, sqp_solve
from .symbolic import DomainError, Function
from .transcription import NlpIterate, OcpNlp, SteadyState, _stage_point, kkt_residual

DEGRADED = "degraded"
SKIPPED = "skipped"


def _fill_state(nlp: OcpNlp, ss: SteadyState, x_prev, p=None, reference=None):
    """Steady state used to complete a shifted trajectory (cyclic states rolled out)."""
    x_fill = ss.x.copy() if reference is None else reference(p)[0]
    u_fill = ss.u.copy() if reference is None else reference(p)[1]
    if ss.cyclic_states:
        cyc = list(ss.cyclic_states)
        x_fill[cyc] = nlp.ocp.dynamics.f.eval(np.concatenate([x_prev, u_fill]))[cyc]
    return x_fill, u_fill


def shift_guess(nlp: OcpNlp, z: NlpIterate, ss: SteadyState, reference=None) -> NlpIterate:
    """Move stages ``1..N`` to ``0..N-1`` and append the steady-state pair."""
    X, U = nlp.split(z.w)
    Xn = np.vstack([X[1:], X[-1:]])
    Un = np.vstack([U[1:], U[-1:]])
    x_fill, u_fill = _fill_state(nlp, ss, X[-1], nlp.params[-1], reference)
    Un[-1] = u_fill
    Xn[-1] = x_fill
    lam = np.vstack([z.lam[1:], ss.lam[None]])
    mu = np.vstack([z.mu[1:], ss.mu[None]]) if nlp.n_h else z.mu.copy()
    return NlpIterate(nlp.join(Xn, Un), lam, mu, np.array(z.nu, float))


@dataclass
class RtiController:
    """One QP per sample (``converged=False``) or a full SQP solve per sample.

    ``params`` maps the sample index to the stage parameter profile
    ``(N+1, n_p)``; ``reference`` maps a parameter vector to the steady pair
    ``(x_s, u_s)`` used when completing shifted guesses.
    """

    nlp: OcpNlp
    strategy: HessianStrategy
    ss: SteadyState
    guess: NlpIterate
    converged: bool = False
    shift: bool = True
    params: Callable | None = None
    reference: Callable | None = None
    tolerate_nonconvex: bool = False
    divergence_threshold: float = 1e8
    name: str = ""
    tol: float = 1e-8
    max_iter: int = 100
    hint: tuple = ()
    u_prev: np.ndarray | None = None
    sample: int = 0
    last_status: str = ""
    last_kkt: float = float("nan")
    diverged: bool = False
    history: list = field(default_factory=list)


def make_controller(nlp: OcpNlp, strategy: HessianStrategy, ss: SteadyState, guess: NlpIterate, **kw) -> RtiController:
    ctrl = RtiController(nlp, strategy, ss, guess.copy(), **kw)
    ctrl.hint = nlp.active_hint(guess)
    ctrl.u_prev = ss.u.copy()
    return ctrl


def rti_step(ctrl: RtiController, x_hat0) -> tuple[np.ndarray, RtiController]:
    """Compute the control for the current sample and prepare the next guess."""
    nlp = ctrl.nlp.with_x0(x_hat0)
    if ctrl.params is not None:
        nlp = nlp.with_params(ctrl.params(ctrl.sample))
    z = ctrl.guess
    status = OPTIMAL
    try:
        if ctrl.converged:
            z_new, tr = sqp_solve(nlp, ctrl.strategy, z, tol=ctrl.tol, max_iter=ctrl.max_iter,
                                  line_search=True, hint=ctrl.hint)
            ctrl.last_kkt = tr.kkt[0]
            status = tr.status
            if tr.status != CONVERGED:
                status = DEGRADED if not np.all(np.isfinite(z_new.w)) else tr.status
            if tr.active_sets:
                ctrl.hint = tr.active_sets[-1]
        else:
            lin = nlp.linearize(z.w, z if ctrl.strategy.reads_duals else None, ctrl.strategy.hessian_request)
            ctrl.last_kkt = kkt_residual(nlp, z, lin).inf_norm
            sol, _, _ = qp_step(nlp, ctrl.strategy, z, ctrl.hint, lin)
            status = sol.status
            if sol.status == OPTIMAL:
                z_new = nlp.unpack(z.w + sol.w, sol.lam, sol.mu)
                ctrl.hint = sol.active_set
            elif sol.status == NONCONVEX and ctrl.tolerate_nonconvex:
                z_new, status = z, SKIPPED
            else:
                z_new, status = None, DEGRADED
    except (DomainError, FloatingPointError, np.linalg.LinAlgError) as exc:
        z_new, status = None, DEGRADED
        ctrl.last_kkt = float("inf")
        ctrl.history.append(str(exc))
    if z_new is None or not np.all(np.isfinite(z_new.w)):
        u0 = ctrl.u_prev.copy()
        status = DEGRADED
        z_new = z
    else:
        u0 = z_new.w[nlp.u_index(0)].copy()
    if not np.isfinite(ctrl.last_kkt) or ctrl.last_kkt > ctrl.divergence_threshold:
        ctrl.diverged = True
    ctrl.last_status = status
    ctrl.u_prev = u0
    ctrl.sample += 1
    if ctrl.shift:
        nxt = nlp.with_params(ctrl.params(ctrl.sample)) if ctrl.params is not None else nlp
        ctrl.guess = shift_guess(nxt, z_new, ctrl.ss, ctrl.reference)
    else:
        ctrl.guess = z_new
    return u0, ctrl


@dataclass
class ClosedLoopTrace:
    x: np.ndarray
    u: np.ndarray
    stage_cost: np.ndarray
    kkt: np.ndarray
    qp_status: list
    dt: float
    diverged: bool = False
    name: str = ""

    @property
    def N_sim(self) -> int:
        return self.u.shape[0]

    @property
    def J_cl(self) -> float:
        return float(np.sum(self.stage_cost))

    def to_csv(self, path) -> None:
        nx, nu = self.x.shape[1], self.u.shape[1]
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["k", "t"] + [f"x{i}" for i in range(nx)] + [f"u{i}" for i in range(nu)]
                        + ["stage_cost", "kkt_inf", "qp_status"])
            for k in range(self.N_sim):
                wr.writerow([k, repr(k * self.dt)] + [repr(float(v)) for v in self.x[k]]
                            + [repr(float(v)) for v in self.u[k]]
                            + [repr(float(self.stage_cost[k])), repr(float(self.kkt[k])), self.qp_status[k]])


def simulate_closed_loop(plant: DiscreteDynamics, ctrl: RtiController, x0, N_sim: int,
                         meter: Function, meter_params: Callable | None = None) -> ClosedLoopTrace:
    """Run ``N_sim`` samples; ``meter(x, u[, p])`` is the economic stage cost summed into ``J_cl``."""
    x = np.asarray(x0, float).copy()
    xs, us, costs, kkts, stats = [x.copy()], [], [], [], []
    diverged = False
    for k in range(N_sim):
        u, ctrl = rti_step(ctrl, x)
        p = None if meter_params is None else meter_params(k)
        wpt = np.concatenate([x, u])
        try:
            cost = float(meter.eval(_stage_point(meter, wpt, p) if p is not None else wpt)[0])
            x_next = plant.f.eval(wpt)
        except DomainError:
            diverged = True
            break
        us.append(u)
        costs.append(cost)
        kkts.append(ctrl.last_kkt)
        stats.append(ctrl.last_status)
        if ctrl.diverged or not np.all(np.isfinite(x_next)):
            diverged = True
            xs.append(x_next)
            break
        x = x_next
        xs.append(x.copy())
    nu = plant.n_u
    return ClosedLoopTrace(np.array(xs), np.array(us).reshape(-1, nu), np.array(costs), np.array(kkts), stats,
                           plant.dt, diverged, ctrl.name)


class PerformanceLossError(ValueError):
    pass


def performance_loss(trace: ClosedLoopTrace, baseline: ClosedLoopTrace, ell_s: float,
                     normalize_abs: bool = True) -> float:
    """``(J_cl - J_cl_baseline) / (l(w_s) * N_sim) * 100``.

    With ``normalize_abs`` the denominator uses ``|l(w_s)|`` so the sign of
    the result always means "worse than the baseline" for positive values.
    """
    if trace.N_sim != baseline.N_sim:
        raise PerformanceLossError("traces have different lengths")
    if ell_s == 0:
        raise PerformanceLossError("l(w_s) is zero: measure with the physical (unshifted) stage cost")
    denom = abs(ell_s) if normalize_abs else ell_s
    return (trace.J_cl - baseline.J_cl) / (denom * trace.N_sim) * 100.0
