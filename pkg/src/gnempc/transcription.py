"""Multiple-shooting transcription of the economic optimal control problem.

Conventions used throughout the package:

* variables ``w = (x_0, u_0, x_1, u_1, ..., x_{N-1}, u_{N-1}, x_N)``;
* constraint order: initial value, dynamics ``k = 0..N-1``, path ``k = 0..N-1``,
  terminal;
* equality rows ``x_0 - x_hat0 = 0`` and ``x_{k+1} - f(x_k, u_k) = 0``, path
  rows ``h(x_k, u_k) >= 0``, terminal rows ``g_f(x_N) = 0`` or ``>= 0``;
* Lagrangian ``J(w) - sum y' c(w)`` over all constraints, so inequality
  multipliers are nonnegative and the dynamics multipliers ``lam_{k+1}``
  enter the stage Hessian as ``+<d2 f, lam_{k+1}>``.

Stage functions take ``(x, u)`` or ``(x, u, p)`` where ``p`` is a stage
parameter vector; terminal functions take ``x`` or ``(x, p)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from .integrator import DiscreteDynamics
from .qpsolver import BlockDiagonal, ShootingStructure
from .symbolic import Function, symbols

EQ = "eq"
INEQ = "ineq"


@dataclass(frozen=True)
class OcpSpec:
    N: int
    dynamics: DiscreteDynamics
    stage_cost: Function
    path_constraints: Function | None = None
    terminal_cost: Function | None = None
    terminal_constraints: Function | None = None
    terminal_kinds: tuple[str, ...] | None = None
    n_p: int = 0
    cyclic_states: tuple[int, ...] = ()
    name: str = "ocp"

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("horizon N must be >= 1")
        nz = self.n_x + self.n_u
        for fn, label in ((self.stage_cost, "stage cost"), (self.path_constraints, "path constraints")):
            if fn is not None and fn.n_in not in (nz, nz + self.n_p):
                raise ValueError(f"{label} takes {fn.n_in} inputs, expected {nz} or {nz + self.n_p}")
        if self.stage_cost.n_out != 1:
            raise ValueError("stage cost must be scalar")
        for fn, label in ((self.terminal_cost, "terminal cost"), (self.terminal_constraints, "terminal constraints")):
            if fn is not None and fn.n_in not in (self.n_x, self.n_x + self.n_p):
                raise ValueError(f"{label} must take x (and optionally p) only")
        if self.terminal_cost is not None and self.terminal_cost.n_out != 1:
            raise ValueError("terminal cost must be scalar")
        if self.terminal_constraints is not None:
            kinds = self.terminal_kinds or (EQ,) * self.terminal_constraints.n_out
            if len(kinds) != self.terminal_constraints.n_out or any(k not in (EQ, INEQ) for k in kinds):
                raise ValueError("terminal_kinds must list 'eq' or 'ineq' for every terminal row")
            object.__setattr__(self, "terminal_kinds", tuple(kinds))
        else:
            object.__setattr__(self, "terminal_kinds", ())
        if any(not 0 <= i < self.n_x for i in self.cyclic_states):
            raise ValueError("cyclic state index out of range")

    @property
    def n_x(self) -> int:
        return self.dynamics.n_x

    @property
    def n_u(self) -> int:
        return self.dynamics.n_u

    @property
    def n_h(self) -> int:
        return 0 if self.path_constraints is None else self.path_constraints.n_out

    @property
    def n_g(self) -> int:
        return 0 if self.terminal_constraints is None else self.terminal_constraints.n_out

    @property
    def n_w(self) -> int:
        return self.N * (self.n_x + self.n_u) + self.n_x

    def with_horizon(self, N: int) -> "OcpSpec":
        return replace(self, N=int(N))


@dataclass
class NlpIterate:
    """Primal-dual point ``(w, lam, mu, nu)``."""

    w: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    nu: np.ndarray

    def copy(self) -> "NlpIterate":
        return NlpIterate(self.w.copy(), self.lam.copy(), self.mu.copy(), self.nu.copy())


class KktResidual(NamedTuple):
    stationarity: np.ndarray
    feasibility: np.ndarray
    complementarity: np.ndarray
    inf_norm: float


@dataclass
class Linearization:
    w: np.ndarray
    cost: float
    grad: np.ndarray
    c_eq: np.ndarray
    E: object
    c_in: np.ndarray
    C: object
    hessian: BlockDiagonal | None = None
    shooting: ShootingStructure | None = None


def _stage_point(fn: Function, Z: np.ndarray, P: np.ndarray) -> np.ndarray:
    return Z if fn.n_in == Z.shape[-1] else np.concatenate([Z, P], axis=-1)


def _stack_hessian(bundle, n):
    if bundle.weighted_hessian is None:
        return np.zeros(n)
    return bundle.weighted_hessian


class OcpNlp:
    """Structured NLP for an :class:`OcpSpec` at a fixed initial state and parameter profile."""

    def __init__(self, ocp: OcpSpec, x_hat0, params=None):
        self.ocp = ocp
        N, nx, nu = ocp.N, ocp.n_x, ocp.n_u
        self.N, self.n_x, self.n_u = N, nx, nu
        self.nz = nz = nx + nu
        self.n_w = ocp.n_w
        x_hat0 = np.asarray(x_hat0, float).ravel()
        if x_hat0.size != nx:
            raise ValueError(f"x_hat0 has dimension {x_hat0.size}, expected {nx}")
        self.x_hat0 = x_hat0
        if params is None:
            params = np.zeros((N + 1, ocp.n_p))
        params = np.asarray(params, float)
        if params.ndim == 1:
            params = np.broadcast_to(params, (N + 1, params.size))
        if params.shape != (N + 1, ocp.n_p):
            raise ValueError(f"params must have shape ({N + 1}, {ocp.n_p})")
        self.params = np.array(params)
        kinds = np.array(ocp.terminal_kinds, dtype=object)
        self.term_eq = np.flatnonzero(kinds == EQ) if kinds.size else np.zeros(0, int)
        self.term_in = np.flatnonzero(kinds == INEQ) if kinds.size else np.zeros(0, int)
        self.n_h = ocp.n_h
        self.n_eq = (N + 1) * nx + self.term_eq.size
        self.n_in = N * self.n_h + self.term_in.size
        # path rows at stage 0 that no decision variable can influence are not imposed
        self.imposed = np.ones(self.n_in, dtype=bool)
        if self.n_h:
            dep = ocp.path_constraints.dependencies()
            self.imposed[: self.n_h] = dep[:, nx:nx + nu].any(axis=1)
        self._build_patterns()

    # ------------------------------------------------------------------
    def with_x0(self, x_hat0) -> "OcpNlp":
        out = object.__new__(OcpNlp)
        out.__dict__.update(self.__dict__)
        x_hat0 = np.asarray(x_hat0, float).ravel()
        if x_hat0.size != self.n_x:
            raise ValueError("x_hat0 dimension mismatch")
        out.x_hat0 = x_hat0
        return out

    def with_params(self, params) -> "OcpNlp":
        out = object.__new__(OcpNlp)
        out.__dict__.update(self.__dict__)
        params = np.asarray(params, float)
        if params.shape != self.params.shape:
            raise ValueError("params shape mismatch")
        out.params = params.copy()
        return out

    def _build_patterns(self):
        N, nx, nz = self.N, self.n_x, self.nz
        # equality pattern: initial identity, dynamics identity, dynamics -[A B], terminal rows
        ri = np.arange(nx)
        rows = [ri, (np.arange(1, N + 1)[:, None] * nx + ri).ravel()]
        cols = [ri, (np.arange(1, N + 1)[:, None] * nz + ri).ravel()]
        k, i, j = np.meshgrid(np.arange(N), np.arange(nx), np.arange(nz), indexing="ij")
        rows.append(((k + 1) * nx + i).ravel())
        cols.append((k * nz + j).ravel())
        ne = self.term_eq.size
        t, j2 = np.meshgrid(np.arange(ne), np.arange(nx), indexing="ij")
        rows.append(((N + 1) * nx + t).ravel())
        cols.append((N * nz + j2).ravel())
        self._E_rows = np.concatenate(rows)
        self._E_cols = np.concatenate(cols)
        self._E_nconst = nx * (N + 1)
        # inequality pattern: path blocks then terminal inequality rows
        nh = self.n_h
        k, i, j = np.meshgrid(np.arange(N), np.arange(nh), np.arange(nz), indexing="ij")
        ni = self.term_in.size
        t, j2 = np.meshgrid(np.arange(ni), np.arange(nx), indexing="ij")
        self._C_rows = np.concatenate([(k * nh + i).ravel(), (N * nh + t).ravel()])
        self._C_cols = np.concatenate([(k * nz + j).ravel(), (N * nz + j2).ravel()])

    # index helpers ----------------------------------------------------
    def split(self, w):
        """Return ``(X, U)`` with shapes ``(N+1, n_x)`` and ``(N, n_u)``."""
        w = np.asarray(w, float)
        nz = self.nz
        Z = w[: self.N * nz].reshape(self.N, nz)
        X = np.vstack([Z[:, : self.n_x], w[self.N * nz:][None]])
        return X, Z[:, self.n_x:].copy()

    def join(self, X, U) -> np.ndarray:
        X = np.asarray(X, float)
        U = np.asarray(U, float)
        Z = np.hstack([X[:-1], U])
        return np.concatenate([Z.ravel(), X[-1]])

    def x_index(self, k: int) -> slice:
        return slice(k * self.nz, k * self.nz + self.n_x)

    def u_index(self, k: int) -> slice:
        return slice(k * self.nz + self.n_x, (k + 1) * self.nz)

    def pack_duals(self, z: NlpIterate):
        nu = np.asarray(z.nu, float)
        y_eq = np.concatenate([np.asarray(z.lam, float).ravel(), nu[self.term_eq]])
        y_in = np.concatenate([np.asarray(z.mu, float).ravel(), nu[self.term_in]])
        y_in[~self.imposed] = 0.0
        return y_eq, y_in

    def unpack(self, w, y_eq, y_in) -> NlpIterate:
        nx = self.n_x
        nl = (self.N + 1) * nx
        nu = np.zeros(self.ocp.n_g)
        nu[self.term_eq] = y_eq[nl:]
        nu[self.term_in] = y_in[self.N * self.n_h:]
        return NlpIterate(np.array(w, float), y_eq[:nl].reshape(self.N + 1, nx).copy(),
                          y_in[: self.N * self.n_h].reshape(self.N, self.n_h).copy(), nu)

    def zero_duals(self, w) -> NlpIterate:
        return self.unpack(w, np.zeros(self.n_eq), np.zeros(self.n_in))

    def check_iterate(self, z: NlpIterate):
        if np.size(z.w) != self.n_w:
            raise ValueError(f"iterate has {np.size(z.w)} primal entries, expected {self.n_w}")
        if np.shape(z.lam) != (self.N + 1, self.n_x) or np.shape(z.mu) != (self.N, self.n_h) \
                or np.size(z.nu) != self.ocp.n_g:
            raise ValueError("iterate dual dimensions do not match the NLP")

    # evaluation -------------------------------------------------------
    def _stage_data(self, w):
        X, U = self.split(w)
        Zs = np.hstack([X[:-1], U])
        return X, Zs

    def evaluate(self, w):
        """Return ``(cost, c_eq, c_in)``."""
        ocp = self.ocp
        X, Zs = self._stage_data(w)
        P = self.params[:-1]
        pN = self.params[-1]
        cost = float(np.sum(ocp.stage_cost.eval(_stage_point(ocp.stage_cost, Zs, P))))
        if ocp.terminal_cost is not None:
            cost += float(ocp.terminal_cost.eval(_stage_point(ocp.terminal_cost, X[-1], pN))[0])
        F = ocp.dynamics.f.eval(Zs)
        c_eq = [X[0] - self.x_hat0, (X[1:] - F).ravel()]
        c_in = []
        if self.n_h:
            c_in.append(ocp.path_constraints.eval(_stage_point(ocp.path_constraints, Zs, P)).ravel())
        if ocp.terminal_constraints is not None:
            g = ocp.terminal_constraints.eval(_stage_point(ocp.terminal_constraints, X[-1], pN))
            c_eq.append(g[self.term_eq])
            c_in.append(g[self.term_in])
        c_in = np.concatenate(c_in) if c_in else np.zeros(0)
        c_in[~self.imposed] = 1.0
        return cost, np.concatenate(c_eq), c_in

    def linearize(self, w, z: NlpIterate | None = None, hessian: str | None = None) -> Linearization:
        """Values and first derivatives; ``hessian`` is None, ``"lagrangian"`` or ``"cost"``."""
        ocp = self.ocp
        N, nx, nz = self.N, self.n_x, self.nz
        w = np.asarray(w, float)
        X, Zs = self._stage_data(w)
        P = self.params[:-1]
        pN = self.params[-1]
        order = 2 if hessian else 1
        lag = hessian == "lagrangian"
        if lag and z is None:
            raise ValueError("the Lagrangian Hessian needs dual variables")
        if hessian not in (None, "lagrangian", "cost"):
            raise ValueError(f"unknown Hessian request {hessian!r}")

        lc = ocp.stage_cost.derivatives(_stage_point(ocp.stage_cost, Zs, P), order, n_diff=nz)
        grad = np.zeros(self.n_w)
        grad[: N * nz] = lc.jacobian[:, 0, :].ravel()
        cost = float(np.sum(lc.value))
        Hs = _stack_hessian(lc, (N, nz, nz)) if order == 2 else None

        lam_next = np.asarray(z.lam, float)[1:] if lag else None
        fd = ocp.dynamics.f.derivatives(Zs, 2 if lag else 1, weight=lam_next)
        if lag:
            Hs = Hs + fd.weighted_hessian
        J = fd.jacobian
        c_eq = [X[0] - self.x_hat0, (X[1:] - fd.value).ravel()]
        E_data = [np.ones(nx * (N + 1)), -J.ravel()]

        c_in, C_data = [], []
        if self.n_h:
            h = ocp.path_constraints
            free0 = ~self.imposed[: self.n_h]
            if lag:
                mu_w = np.array(z.mu, float)
                mu_w[0, free0] = 0.0
            hd = h.derivatives(_stage_point(h, Zs, P), 2 if lag else 1,
                               weight=-mu_w if lag else None, n_diff=nz)
            hval, hjac = hd.value, hd.jacobian
            hval[0, free0] = 1.0
            hjac[0, free0] = 0.0
            c_in.append(hval.ravel())
            C_data.append(hjac.ravel())
            if lag:
                Hs = Hs + hd.weighted_hessian

        HN = np.zeros((nx, nx)) if order == 2 else None
        if ocp.terminal_cost is not None:
            V = ocp.terminal_cost
            vd = V.derivatives(_stage_point(V, X[-1], pN), order, n_diff=nx)
            cost += float(vd.value[0])
            grad[N * nz:] = vd.jacobian[0]
            if order == 2:
                HN = HN + vd.weighted_hessian
        if ocp.terminal_constraints is not None:
            g = ocp.terminal_constraints
            gd = g.derivatives(_stage_point(g, X[-1], pN), 2 if lag else 1,
                               weight=-np.asarray(z.nu, float) if lag else None, n_diff=nx)
            c_eq.append(gd.value[self.term_eq])
            E_data.append(gd.jacobian[self.term_eq].ravel())
            c_in.append(gd.value[self.term_in])
            C_data.append(gd.jacobian[self.term_in].ravel())
            if lag:
                HN = HN + gd.weighted_hessian

        E = sp.csr_matrix((np.concatenate(E_data), (self._E_rows, self._E_cols)), shape=(self.n_eq, self.n_w))
        C = sp.csr_matrix((np.concatenate(C_data) if C_data else np.zeros(0), (self._C_rows, self._C_cols)),
                          shape=(self.n_in, self.n_w))
        hess = BlockDiagonal(Hs, HN) if order == 2 else None
        shooting = ShootingStructure(J[:, :, :nx], J[:, :, nx:])
        return Linearization(w, cost, grad, np.concatenate(c_eq), E,
                             np.concatenate(c_in) if c_in else np.zeros(0), C, hess, shooting)

    def lagrangian_hessian(self, z: NlpIterate) -> BlockDiagonal:
        return self.linearize(z.w, z, "lagrangian").hessian

    def cost_hessian(self, w) -> BlockDiagonal:
        return self.linearize(w, None, "cost").hessian

    def active_hint(self, z: NlpIterate, tol: float = 0.0) -> tuple[int, ...]:
        _, y_in = self.pack_duals(z)
        return tuple(int(i) for i in np.flatnonzero(y_in > tol))


def build_nlp(ocp: OcpSpec, x_hat0, params=None) -> OcpNlp:
    return OcpNlp(ocp, x_hat0, params)


def kkt_residual(nlp, z: NlpIterate, lin: Linearization | None = None) -> KktResidual:
    """Stationarity, primal feasibility and complementarity of ``z``."""
    nlp.check_iterate(z)
    if lin is None:
        lin = nlp.linearize(z.w)
    y_eq, y_in = nlp.pack_duals(z)
    stat = lin.grad - lin.E.T @ y_eq - (lin.C.T @ y_in if y_in.size else 0.0)
    feas = np.concatenate([lin.c_eq, np.minimum(lin.c_in, 0.0)])
    comp = np.concatenate([y_in * lin.c_in, np.minimum(y_in, 0.0)])
    norm = max((float(np.max(np.abs(v))) for v in (stat, feas, comp) if v.size), default=0.0)
    return KktResidual(np.asarray(stat), feas, comp, norm)


# --------------------------------------------------------------------------
# steady-state optimisation problem


@dataclass(frozen=True)
class SteadyState:
    x: np.ndarray
    u: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    ell_offset: float
    params: np.ndarray = field(default_factory=lambda: np.zeros(0))
    cyclic_states: tuple[int, ...] = ()
    kkt: float = 0.0

    @property
    def w(self) -> np.ndarray:
        return np.concatenate([self.x, self.u])

    def active_set(self, tol: float = 1e-8) -> np.ndarray:
        """Strictly active path rows: ``mu_i > tol``."""
        return np.flatnonzero(self.mu > tol)


class SopNlp:
    """``min l(x,u)  s.t.  x - f(x,u) = 0 (non-cyclic rows), x_c = x_c0, h(x,u) >= 0``."""

    def __init__(self, stage_cost: Function, dynamics: DiscreteDynamics, path_constraints=None,
                 params=None, cyclic_states=(), cyclic_values=None):
        self.l, self.dyn, self.h = stage_cost, dynamics, path_constraints
        nx, nu = dynamics.n_x, dynamics.n_u
        self.n_x, self.n_u = nx, nu
        self.n_w = nx + nu
        self.params = np.zeros(0) if params is None else np.asarray(params, float).ravel()
        self.cyclic = np.asarray(sorted(cyclic_states), int)
        self.noncyclic = np.setdiff1d(np.arange(nx), self.cyclic)
        self.cyclic_values = np.zeros(self.cyclic.size) if cyclic_values is None \
            else np.asarray(cyclic_values, float).ravel()
        self.n_h = 0 if path_constraints is None else path_constraints.n_out
        self.n_eq = nx
        self.n_in = self.n_h

    def _pt(self, fn, w):
        return _stage_point(fn, np.asarray(w, float), self.params)

    def evaluate(self, w):
        w = np.asarray(w, float)
        x = w[: self.n_x]
        cost = float(self.l.eval(self._pt(self.l, w))[0])
        F = self.dyn.f.eval(w)
        c_eq = np.empty(self.n_x)
        c_eq[: self.noncyclic.size] = (x - F)[self.noncyclic]
        c_eq[self.noncyclic.size:] = x[self.cyclic] - self.cyclic_values
        c_in = self.h.eval(self._pt(self.h, w)) if self.n_h else np.zeros(0)
        return cost, c_eq, c_in

    def linearize(self, w, z=None, hessian=None) -> Linearization:
        w = np.asarray(w, float)
        nx, nz = self.n_x, self.n_w
        lag = hessian == "lagrangian"
        order = 2 if hessian else 1
        ld = self.l.derivatives(self._pt(self.l, w), order, n_diff=nz)
        H = ld.weighted_hessian if order == 2 else None
        lam_full = None
        if lag:
            lam_full = np.zeros(nx)
            lam_full[self.noncyclic] = np.asarray(z.lam, float)[: self.noncyclic.size]
        fd = self.dyn.f.derivatives(w, 2 if lag else 1, weight=lam_full)
        if lag:
            H = H + fd.weighted_hessian
        x = w[:nx]
        E = np.zeros((nx, nz))
        k = self.noncyclic.size
        E[:k] = (np.hstack([np.eye(nx), np.zeros((nx, self.n_u))]) - fd.jacobian)[self.noncyclic]
        E[k:, self.cyclic] = np.eye(self.cyclic.size)
        c_eq = np.concatenate([(x - fd.value)[self.noncyclic], x[self.cyclic] - self.cyclic_values])
        if self.n_h:
            hd = self.h.derivatives(self._pt(self.h, w), 2 if lag else 1,
                                    weight=-np.asarray(z.mu, float) if lag else None, n_diff=nz)
            c_in, C = hd.value, hd.jacobian
            if lag:
                H = H + hd.weighted_hessian
        else:
            c_in, C = np.zeros(0), np.zeros((0, nz))
        hess = BlockDiagonal(H[None]) if order == 2 else None
        return Linearization(w, float(ld.value[0]), ld.jacobian[0], c_eq, E, c_in, C, hess)

    def pack_duals(self, z):
        return np.asarray(z.lam, float), np.asarray(z.mu, float)

    def unpack(self, w, y_eq, y_in):
        return NlpIterate(np.array(w, float), np.array(y_eq, float), np.array(y_in, float), np.zeros(0))

    def zero_duals(self, w):
        return self.unpack(w, np.zeros(self.n_eq), np.zeros(self.n_in))

    def check_iterate(self, z):
        if np.size(z.w) != self.n_w or np.size(z.lam) != self.n_eq or np.size(z.mu) != self.n_in:
            raise ValueError("iterate dimensions do not match the steady-state problem")

    def active_hint(self, z, tol: float = 0.0):
        return tuple(int(i) for i in np.flatnonzero(np.asarray(z.mu) > tol))

    def lagrangian_hessian(self, z):
        return self.linearize(z.w, z, "lagrangian").hessian

    def cost_hessian(self, w):
        return self.linearize(w, None, "cost").hessian


class SopError(RuntimeError):
    pass


def solve_sop(stage_cost: Function, dynamics: DiscreteDynamics, path_constraints: Function | None = None,
              guess=None, params=None, cyclic_states=(), tol: float = 1e-10, max_iter: int = 100) -> SteadyState:
    """Solve the steady-state problem with the SQP engine (regularized exact Hessian, line search).

    Cyclic states (e.g. a travelled distance) are excluded from the steady-state
    equations and pinned at their guess value; their multipliers are zero.
    """
    from .sqp import HessianStrategy, sqp_solve

    nx, nu = dynamics.n_x, dynamics.n_u
    if guess is None:
        w0 = np.zeros(nx + nu)
    else:
        w0 = np.concatenate([np.ravel(guess[0]), np.ravel(guess[1])]).astype(float)
    cyc = tuple(sorted(cyclic_states))
    nlp = SopNlp(stage_cost, dynamics, path_constraints, params, cyc, w0[list(cyc)])
    z0 = nlp.zero_duals(w0)
    z, trace = sqp_solve(nlp, HessianStrategy.exact_regularized(), z0, tol=tol, max_iter=max_iter,
                         line_search=True)
    if trace.status != "converged":
        raise SopError(f"steady-state problem did not converge ({trace.status}); "
                       f"last KKT residual {trace.kkt[-1]:.3e}")
    lam = np.zeros(nx)
    lam[nlp.noncyclic] = z.lam[: nlp.noncyclic.size]
    w = z.w
    ell = float(stage_cost.eval(_stage_point(stage_cost, w, nlp.params))[0])
    return SteadyState(w[:nx].copy(), w[nx:].copy(), lam, np.maximum(z.mu, 0.0), ell,
                       nlp.params.copy(), cyc, trace.kkt[-1])


# --------------------------------------------------------------------------
# storage functions, rotation, shifting


class StorageFunction:
    """Scalar ``Lambda(x)`` shifted so that ``Lambda(x_s) = 0``."""

    def __init__(self, fn: Function, x_s):
        if fn.n_out != 1:
            raise ValueError("storage function must be scalar")
        x_s = np.asarray(x_s, float).ravel()
        if fn.n_in != x_s.size:
            raise ValueError("storage function input dimension differs from the state dimension")
        offset = float(fn.eval(x_s)[0])
        x = symbols(x_s.size)
        self.fn = Function(f"{fn.name}_shifted", [("x", x_s.size)], [fn.call(x)[0] - offset]) if offset != 0.0 else fn
        self.x_s = x_s
        self.n_x = x_s.size

    @classmethod
    def zero(cls, n_x: int, x_s=None) -> "StorageFunction":
        return cls(Function("zero", [("x", n_x)], [0.0]), np.zeros(n_x) if x_s is None else x_s)

    @classmethod
    def quadratic(cls, P, x_s, q=None) -> "StorageFunction":
        """``(x - x_s)' P (x - x_s) + q' (x - x_s)``."""
        P = np.asarray(P, float)
        x_s = np.asarray(x_s, float).ravel()
        q = np.zeros(x_s.size) if q is None else np.asarray(q, float)
        n = x_s.size

        def fn(x):
            d = x - x_s
            return [d @ (P @ d) + q @ d]
        return cls(Function.from_callable("storage", fn, [("x", n)]), x_s)

    def __call__(self, x):
        return float(self.fn.eval(np.asarray(x, float))[0])

    def gradient(self, x) -> np.ndarray:
        return self.fn.jacobian(np.asarray(x, float))[..., 0, :]

    def call(self, x):
        return self.fn.call(x)[0]


def rotate(ocp: OcpSpec, storage: StorageFunction) -> OcpSpec:
    """Rotated problem: ``l + Lambda(x) - Lambda(f(x,u))`` and ``V_f + Lambda``."""
    nx, nu, n_p = ocp.n_x, ocp.n_u, ocp.n_p
    if storage.n_x != nx:
        raise ValueError("storage function dimension differs from n_x")
    l = ocp.stage_cost
    with_p = l.n_in > nx + nu
    ins = [("x", nx), ("u", nu)] + ([("p", n_p)] if with_p else [])
    v = symbols(nx + nu + (n_p if with_p else 0))
    x, u = v[:nx], v[nx:nx + nu]
    xn = ocp.dynamics.f.call(x, u)
    lbar = l.call(v)[0] + storage.call(x) - storage.call(xn)
    stage = Function(f"{l.name}_rot", ins, [lbar])
    V = ocp.terminal_cost
    if V is None:
        term = Function("Vf_rot", [("x", nx)], [storage.call(symbols(nx))])
    else:
        tv = symbols(V.n_in)
        tins = [("x", nx)] + ([("p", n_p)] if V.n_in > nx else [])
        term = Function(f"{V.name}_rot", tins, [V.call(tv)[0] + storage.call(tv[:nx])])
    return replace(ocp, stage_cost=stage, terminal_cost=term, name=f"{ocp.name}_rotated")


def shift_costs(ocp: OcpSpec, ss: SteadyState) -> OcpSpec:
    """Subtract the steady-state stage cost so that ``l(w_s) = 0``."""
    l = ocp.stage_cost
    v = symbols(l.n_in)
    stage = Function(f"{l.name}_shifted", l.inputs, [l.call(v)[0] - ss.ell_offset])
    return replace(ocp, stage_cost=stage)


def steady_iterate(nlp: OcpNlp, ss: SteadyState, x_hat0=None) -> NlpIterate:
    """Constant trajectory at ``(x_s, u_s)`` with duals ``(lam_s, mu_s)``.

    Cyclic states are rolled forward through the dynamics. Terminal multipliers
    are the least-squares solution of the terminal stationarity condition.
    """
    ocp = nlp.ocp
    N, nx = nlp.N, nlp.n_x
    X = np.tile(ss.x, (N + 1, 1))
    if ss.cyclic_states:
        cyc = list(ss.cyclic_states)
        X[0, cyc] = ss.x[cyc] if x_hat0 is None else np.asarray(x_hat0, float)[cyc]
        for k in range(N):
            X[k + 1, cyc] = ocp.dynamics.f.eval(np.concatenate([X[k], ss.u]))[cyc]
    U = np.tile(ss.u, (N, 1))
    w = nlp.join(X, U)
    lam = np.tile(ss.lam, (N + 1, 1))
    mu = np.tile(ss.mu, (N, 1)) if nlp.n_h else np.zeros((N, 0))
    if nlp.n_h:
        free0 = ~nlp.imposed[: nlp.n_h]
        if np.any(free0 & (ss.mu != 0)):
            # the initial-value multiplier takes over the pull of rows not imposed at stage 0
            h = ocp.path_constraints
            Cx = h.jacobian(_stage_point(h, np.concatenate([X[0], U[0]]), nlp.params[0]), n_diff=nx)
            lam[0] = lam[0] + Cx[free0].T @ ss.mu[free0]
            mu[0, free0] = 0.0
    nu = np.zeros(ocp.n_g)
    if ocp.n_g:
        lin = nlp.linearize(w)
        gradN = lin.grad[N * nlp.nz:]
        pN = nlp.params[-1]
        g = ocp.terminal_constraints
        D = g.jacobian(_stage_point(g, X[-1], pN), n_diff=nx)
        nu = np.linalg.lstsq(D.T, gradN - ss.lam, rcond=None)[0]
    return NlpIterate(w, lam, mu, nu)
