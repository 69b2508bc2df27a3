"""SQP driver with interchangeable Hessian strategies."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .qpsolver import NONCONVEX, OPTIMAL, BlockDiagonal, QpData, solve_qp
from .transcription import NlpIterate, kkt_residual

EXACT = "exact"
EXACT_REGULARIZED = "exact_regularized"
GAUSS_NEWTON_EMPC = "gauss_newton_empc"
IDENTITY = "identity"
FIXED = "fixed"
GAUSS_NEWTON = "gauss_newton"

CONVERGED = "converged"
MAX_ITER = "max_iter"
QP_FAILURE = "qp_failure"


@dataclass(frozen=True)
class HessianStrategy:
    """How the QP Hessian is formed at each iterate.

    ``exact`` and ``exact_regularized`` read the duals; ``exact_regularized``
    keeps the exact Hessian unless the QP reports nonpositive reduced
    curvature, in which case every block is eigenvalue-clamped at ``epsilon``
    and the QP is re-solved. ``gauss_newton_empc`` and ``fixed`` use
    constant stage/terminal blocks, ``identity`` uses ``scale * I`` and
    ``gauss_newton`` the Hessian of the cost alone.
    """

    kind: str
    epsilon: float = 1e-6
    stage_block: np.ndarray | None = field(default=None, repr=False)
    terminal_block: np.ndarray | None = field(default=None, repr=False)
    scale: float = 1.0
    label: str = ""

    @classmethod
    def exact(cls):
        return cls(EXACT, label="Exact")

    @classmethod
    def exact_regularized(cls, epsilon: float = 1e-6):
        return cls(EXACT_REGULARIZED, epsilon=epsilon, label="ExactRegularized")

    @classmethod
    def gauss_newton_empc(cls, convex):
        return cls(GAUSS_NEWTON_EMPC, stage_block=np.array(convex.M), terminal_block=np.array(convex.M_f),
                   label="GaussNewtonEMPC")

    @classmethod
    def fixed(cls, stage_block, terminal_block, label: str = "Fixed"):
        return cls(FIXED, stage_block=np.array(stage_block, float), terminal_block=np.array(terminal_block, float),
                   label=label)

    @classmethod
    def identity(cls, scale: float = 1.0):
        return cls(IDENTITY, scale=float(scale), label="Identity")

    @classmethod
    def gauss_newton(cls):
        return cls(GAUSS_NEWTON, label="GaussNewton")

    @property
    def reads_duals(self) -> bool:
        return self.kind in (EXACT, EXACT_REGULARIZED)

    @property
    def semidefinite(self) -> bool:
        """True when every Hessian this strategy produces is positive semidefinite."""
        if self.kind == IDENTITY:
            return self.scale > 0
        if self.kind in (GAUSS_NEWTON_EMPC, FIXED):
            blocks = [self.stage_block] + ([self.terminal_block] if self.terminal_block.size else [])
            return all(np.linalg.eigvalsh(0.5 * (b + b.T))[0] >= -1e-12 * max(1.0, np.abs(b).max()) for b in blocks)
        return False

    @property
    def hessian_request(self):
        if self.reads_duals:
            return "lagrangian"
        if self.kind == GAUSS_NEWTON:
            return "cost"
        return None

    def blocks(self, nlp, lin) -> BlockDiagonal:
        if lin.hessian is not None:
            return lin.hessian
        n_stage = getattr(nlp, "N", 1)
        nz = nlp.n_x + nlp.n_u
        has_terminal = hasattr(nlp, "N")
        if self.kind == IDENTITY:
            return BlockDiagonal(np.broadcast_to(self.scale * np.eye(nz), (n_stage, nz, nz)),
                                 self.scale * np.eye(nlp.n_x) if has_terminal else None)
        if self.kind in (GAUSS_NEWTON_EMPC, FIXED):
            return BlockDiagonal(np.broadcast_to(self.stage_block, (n_stage, nz, nz)),
                                 self.terminal_block if has_terminal else None)
        raise ValueError(f"strategy {self.kind} needs a Hessian from the linearization")


def exact_lagrangian_hessian(nlp, z: NlpIterate) -> BlockDiagonal:
    """Stage-block-diagonal Hessian of the Lagrangian at ``z``."""
    return nlp.lagrangian_hessian(z)


def _clamp(block: np.ndarray, eps: float) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (block + block.T))
    return (vecs * np.maximum(vals, eps)) @ vecs.T


def regularize(blocks, epsilon: float = 1e-6):
    """Floor every block's eigenvalues at ``epsilon``."""
    if isinstance(blocks, BlockDiagonal):
        return blocks.map(lambda b: _clamp(b, epsilon))
    if isinstance(blocks, np.ndarray) and blocks.ndim == 2:
        return _clamp(blocks, epsilon)
    return [_clamp(np.asarray(b, float), epsilon) for b in blocks]


@dataclass
class SqpTrace:
    iterates: list = field(default_factory=list)
    kkt: list = field(default_factory=list)
    step_norm: list = field(default_factory=list)
    t: list = field(default_factory=list)
    active_sets: list = field(default_factory=list)
    qp_status: list = field(default_factory=list)
    regularized: list = field(default_factory=list)
    status: str = ""
    message: str = ""

    @property
    def n_iter(self) -> int:
        return len(self.step_norm)

    def primal_steps(self) -> list[np.ndarray]:
        return [b.w - a.w for a, b in zip(self.iterates[:-1], self.iterates[1:])]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["iteration", "kkt_inf_norm", "step_norm", "t"])
            for i, r in enumerate(self.kkt):
                s = self.step_norm[i] if i < len(self.step_norm) else 0.0
                t = self.t[i] if i < len(self.t) else 0.0
                wr.writerow([i, repr(float(r)), repr(float(s)), repr(float(t))])


class SqpError(RuntimeError):
    pass


def _merit(nlp, w, rho):
    cost, c_eq, c_in = nlp.evaluate(w)
    infeas = float(np.sum(np.abs(c_eq)) + np.sum(np.maximum(-c_in, 0.0)))
    return cost + rho * infeas, cost, infeas


def _full_step_contracts(nlp, z, sol, r) -> bool:
    try:
        trial = nlp.unpack(z.w + sol.w, sol.lam, sol.mu)
        return kkt_residual(nlp, trial).inf_norm <= 0.5 * r
    except (FloatingPointError, ValueError):
        return False


def qp_step(nlp, strategy: HessianStrategy, z: NlpIterate, hint=None, lin=None):
    """Solve the SQP subproblem at ``z``. Returns ``(solution, linearization, regularized)``."""
    if lin is None:
        lin = nlp.linearize(z.w, z if strategy.reads_duals else None, strategy.hessian_request)
    H = strategy.blocks(nlp, lin)
    data = QpData(H, lin.grad, lin.E, lin.c_eq, lin.C, lin.c_in, lin.shooting, strategy.semidefinite)
    sol = solve_qp(data, hint)
    regularized = False
    if sol.status == NONCONVEX and strategy.kind == EXACT_REGULARIZED:
        data = QpData(regularize(H, strategy.epsilon), lin.grad, lin.E, lin.c_eq, lin.C, lin.c_in, lin.shooting,
                      True)
        sol = solve_qp(data, hint)
        regularized = True
    return sol, lin, regularized


def sqp_solve(nlp, strategy: HessianStrategy, z0: NlpIterate, tol: float = 1e-8, max_iter: int = 100,
              line_search: bool = False, hint=None, raise_on_failure: bool = False):
    """Run SQP from ``z0``; returns ``(z, trace)``.

    Full steps are taken unless ``line_search`` is set, in which case the
    step is halved until an l1 exact-penalty merit function decreases
    sufficiently (penalty ``10 * max |multiplier|``, never decreased). A
    rejected full step is still taken if it halves the KKT residual.
    """
    nlp.check_iterate(z0)
    z = z0.copy()
    trace = SqpTrace()
    trace.iterates.append(z.copy())
    if hint is None:
        hint = nlp.active_hint(z)
    rho = 0.0
    for it in range(max_iter + 1):
        lin = nlp.linearize(z.w, z if strategy.reads_duals else None, strategy.hessian_request)
        if not np.all(np.isfinite(lin.grad)) or not np.all(np.isfinite(lin.c_eq)):
            trace.status, trace.message = QP_FAILURE, "non-finite linearization"
            break
        r = kkt_residual(nlp, z, lin).inf_norm
        trace.kkt.append(r)
        if r <= tol:
            trace.status = CONVERGED
            break
        if it == max_iter:
            trace.status = MAX_ITER
            break
        sol, lin, reg = qp_step(nlp, strategy, z, hint, lin)
        trace.qp_status.append(sol.status)
        trace.regularized.append(reg)
        if sol.status != OPTIMAL:
            trace.status, trace.message = QP_FAILURE, sol.message or sol.status
            break
        dw = sol.w
        y_eq, y_in = nlp.pack_duals(z)
        t = 1.0
        if line_search:
            rho = max(rho, 10.0 * max(float(np.max(np.abs(sol.lam), initial=0.0)),
                                      float(np.max(np.abs(sol.mu), initial=0.0))))
            phi0, _, infeas0 = _merit(nlp, z.w, rho)
            dphi = float(lin.grad @ dw) - rho * infeas0
            # near a primal solution the predicted decrease is at rounding level
            noise = 1e3 * np.finfo(float).eps * (abs(phi0) + float(np.abs(lin.grad) @ np.abs(z.w)))
            while t > 1e-10:
                phi, _, _ = _merit(nlp, z.w + t * dw, rho)
                if np.isfinite(phi) and phi <= phi0 + 1e-4 * t * min(dphi, 0.0) + noise:
                    break
                if t == 1.0 and _full_step_contracts(nlp, z, sol, r):
                    break  # guards against the Maratos effect near a solution
                t *= 0.5
        w_new = z.w + t * dw
        z = nlp.unpack(w_new, y_eq + t * (sol.lam - y_eq), y_in + t * (sol.mu - y_in))
        hint = sol.active_set
        trace.iterates.append(z.copy())
        trace.step_norm.append(float(np.linalg.norm(t * dw)))
        trace.t.append(t)
        trace.active_sets.append(sol.active_set)
    if raise_on_failure and trace.status != CONVERGED:
        raise SqpError(f"SQP terminated with {trace.status}: {trace.message}")
    return z, trace


@dataclass
class IterateComparison:
    primal_gap: np.ndarray
    dual_gap: np.ndarray
    trace_a: SqpTrace
    trace_b: SqpTrace


def compare_iterates(nlp_a, nlp_b, strategy: HessianStrategy, z0_a: NlpIterate, z0_b: NlpIterate,
                     n_iter: int, tol: float = 0.0) -> IterateComparison:
    """Run both problems for ``n_iter`` full-step iterations and report ``||w_a - w_b||``
    and ``max |lam_b - lam_a|`` for iterates ``1..n``."""
    _, ta = sqp_solve(nlp_a, strategy, z0_a, tol=tol, max_iter=n_iter)
    _, tb = sqp_solve(nlp_b, strategy, z0_b, tol=tol, max_iter=n_iter)
    n = min(len(ta.iterates), len(tb.iterates)) - 1
    pg = np.array([np.linalg.norm(ta.iterates[i].w - tb.iterates[i].w) for i in range(1, n + 1)])
    dg = np.array([np.max(np.abs(tb.iterates[i].lam - ta.iterates[i].lam)) for i in range(1, n + 1)])
    return IterateComparison(pg, dg, ta, tb)
