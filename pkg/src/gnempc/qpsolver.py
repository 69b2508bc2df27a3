"""Dense primal active-set QP solver working in the equality null space.

The QP is::

    min  0.5 w' L w + g' w
    s.t. E w + e  = 0
         C w + c >= 0

Equality rows are eliminated first (``w = w0 + Z y``); for multiple-shooting
problems the initial-value and continuity rows can be eliminated with a
forward-sensitivity basis instead of a QR factorisation (see
:class:`ShootingStructure`), the remaining rows always go through QR. The
inequalities are then handled by a primal active-set loop on the reduced
problem. Multipliers follow the convention ``L w + g - E' lam - C' mu = 0``
with ``mu >= 0``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.optimize import linprog

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
NONCONVEX = "nonconvex_detected"
EPS = np.finfo(float).eps
MAX_ITER = "max_iter"


class BlockDiagonal:
    """Block-diagonal symmetric matrix: ``n_stage`` equal blocks plus an optional terminal block."""

    def __init__(self, stage: np.ndarray, terminal: np.ndarray | None = None):
        stage = np.asarray(stage, float)
        if stage.ndim == 2:
            stage = stage[None]
        self.stage = stage
        self.terminal = None if terminal is None or np.size(terminal) == 0 else np.asarray(terminal, float)

    @property
    def n_stage(self) -> int:
        return self.stage.shape[0]

    @property
    def block_size(self) -> int:
        return self.stage.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        n = self.n_stage * self.block_size + (0 if self.terminal is None else self.terminal.shape[0])
        return (n, n)

    def blocks(self) -> list[np.ndarray]:
        out = list(self.stage)
        if self.terminal is not None:
            out.append(self.terminal)
        return out

    def toarray(self) -> np.ndarray:
        return sla.block_diag(*self.blocks())

    def __matmul__(self, X):
        X = np.asarray(X, float)
        vec = X.ndim == 1
        if vec:
            X = X[:, None]
        ns = self.n_stage * self.block_size
        top = np.einsum("kij,kjm->kim", self.stage, X[:ns].reshape(self.n_stage, self.block_size, -1))
        out = [top.reshape(ns, -1)]
        if self.terminal is not None:
            out.append(self.terminal @ X[ns:])
        Y = np.vstack(out)
        return Y[:, 0] if vec else Y

    def map(self, fn) -> "BlockDiagonal":
        return BlockDiagonal(np.stack([fn(b) for b in self.stage]),
                             None if self.terminal is None else fn(self.terminal))

    def __sub__(self, other: "BlockDiagonal") -> "BlockDiagonal":
        return BlockDiagonal(self.stage - other.stage,
                             None if self.terminal is None else self.terminal - other.terminal)


@dataclass(frozen=True)
class ShootingStructure:
    """Sensitivities of ``x_{k+1} = f(x_k, u_k)`` for variables ordered ``x0,u0,...,x_{N-1},u_{N-1},xN``.

    Declares that the first ``(N+1)*n_x`` equality rows of the QP are the
    initial-value row block followed by the continuity rows
    ``dx_{k+1} - A_k dx_k - B_k du_k``.
    """

    A: np.ndarray
    B: np.ndarray

    @property
    def N(self) -> int:
        return self.A.shape[0]

    @property
    def n_x(self) -> int:
        return self.A.shape[1]

    @property
    def n_u(self) -> int:
        return self.B.shape[2]

    @property
    def n_rows(self) -> int:
        return (self.N + 1) * self.n_x


@dataclass
class QpData:
    hessian: object  # ndarray or BlockDiagonal
    gradient: np.ndarray
    E: object = None
    e: np.ndarray | None = None
    C: object = None
    c: np.ndarray | None = None
    shooting: ShootingStructure | None = None
    # the caller guarantees a positive semidefinite Hessian, so any positive pivot is genuine curvature
    convex: bool = False

    def __post_init__(self):
        self.gradient = np.asarray(self.gradient, float)
        n = self.gradient.size
        if self.hessian.shape != (n, n):
            raise ValueError(f"Hessian shape {self.hessian.shape} does not match gradient size {n}")
        self.E = _as_matrix(self.E, n)
        self.C = _as_matrix(self.C, n)
        self.e = np.zeros(0) if self.e is None else np.asarray(self.e, float)
        self.c = np.zeros(0) if self.c is None else np.asarray(self.c, float)
        if self.E.shape[0] != self.e.size or self.C.shape[0] != self.c.size:
            raise ValueError("constraint matrix and vector sizes differ")

    @property
    def n(self) -> int:
        return self.gradient.size

    def hess_matmul(self, X):
        return self.hessian @ X

    def kkt_residual(self, sol: "QpSolution") -> float:
        """Infinity norm of the QP optimality conditions at ``sol``."""
        w, lam, mu = sol.w, sol.lam, sol.mu
        stat = self.hess_matmul(w) + self.gradient - self.E.T @ lam - self.C.T @ mu
        eq = self.E @ w + self.e
        ineq = self.C @ w + self.c
        parts = [np.abs(stat), np.abs(eq), np.maximum(-ineq, 0.0), np.abs(mu * ineq), np.maximum(-mu, 0.0)]
        return max((float(np.max(p)) for p in parts if p.size), default=0.0)


def _as_matrix(M, n):
    if M is None:
        return sp.csr_matrix((0, n))
    if sp.issparse(M):
        return M.tocsr()
    M = np.atleast_2d(np.asarray(M, float))
    if M.size == 0:
        return sp.csr_matrix((0, n))
    if M.shape[1] != n:
        raise ValueError("constraint matrix has wrong number of columns")
    return M


@dataclass
class QpSolution:
    w: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    active_set: tuple[int, ...]
    status: str
    iterations: int = 0
    message: str = ""
    reduced_hessian_min_eig: float | None = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


class QpError(RuntimeError):
    def __init__(self, status: str, message: str = ""):
        super().__init__(f"{status}: {message}" if message else status)
        self.status = status


# --------------------------------------------------------------------------
# equality elimination


class _Elimination:
    """``w = w0 + Z y`` parametrises every solution of ``E w + e = 0``."""

    def __init__(self, data: QpData, tol: float):
        n = data.n
        E, e = data.E, data.e
        self.shooting = data.shooting
        if self.shooting is not None:
            n1 = self.shooting.n_rows
            w1, Z1 = _shooting_nullspace(self.shooting, e[:n1], n)
            E2 = E[n1:]
            e2 = e[n1:]
        else:
            n1 = 0
            w1, Z1 = np.zeros(n), None
            E2, e2 = E, e
        self.n1 = n1
        self.Z1 = Z1
        # second level: QR of the remaining rows in the (possibly reduced) space
        E2 = E2.toarray() if sp.issparse(E2) else np.asarray(E2)
        E2r = E2 if Z1 is None else E2 @ Z1
        r2 = e2 + (E2 @ w1 if E2.size else 0.0)
        p1 = n if Z1 is None else Z1.shape[1]
        self.m2 = E2r.shape[0]
        if self.m2:
            Q, R, piv = sla.qr(E2r.T, mode="full", pivoting=True)
            diag = np.abs(np.diag(R)) if R.size else np.zeros(0)
            scale = max(1.0, float(np.max(np.abs(E2r))) if E2r.size else 1.0)
            rank = int(np.sum(diag > tol * scale * max(E2r.shape)))
            R1 = R[:rank, :]
            # E2r[piv] = R1' Q1'  ->  particular y solves R1' a = -r2[piv]
            a = sla.solve_triangular(R1[:, :rank].T, -r2[piv[:rank]], lower=True) if rank else np.zeros(0)
            resid = R1[:, rank:].T @ a + r2[piv[rank:]] if rank < self.m2 else np.zeros(0)
            if resid.size and np.max(np.abs(resid)) > 1e3 * tol * max(1.0, np.max(np.abs(r2))):
                self.feasible = False
                return
            y2 = Q[:, :rank] @ a
            self.Q1, self.R1, self.piv, self.rank = Q[:, :rank], R1, piv, rank
            Z2 = Q[:, rank:]
        else:
            y2 = np.zeros(p1)
            Z2 = None
            self.rank = 0
        self.feasible = True
        if Z1 is None:
            self.w0 = w1 + y2
            self.Z = np.eye(n) if Z2 is None else Z2
        else:
            self.w0 = w1 + Z1 @ y2
            self.Z = Z1 if Z2 is None else Z1 @ Z2

    def equality_multipliers(self, data: QpData, s: np.ndarray) -> np.ndarray:
        """Solve ``E' lam = s`` for ``s`` in the range of ``E'``."""
        lam2 = np.zeros(self.m2)
        if self.m2 and self.rank:
            s2 = s if self.Z1 is None else self.Z1.T @ s
            sol = sla.solve_triangular(self.R1[:, : self.rank], self.Q1.T @ s2)
            lam2[self.piv[: self.rank]] = sol
        if self.shooting is None:
            return lam2
        E2 = data.E[self.n1:]
        rest = s - (E2.T @ lam2 if self.m2 else 0.0)
        lam1 = _shooting_multipliers(self.shooting, rest)
        return np.concatenate([lam1, lam2])


def _shooting_nullspace(st: ShootingStructure, e1: np.ndarray, n: int):
    N, nx, nu = st.N, st.n_x, st.n_u
    nz = nx + nu
    if n != N * nz + nx:
        raise ValueError("shooting structure does not match the number of variables")
    w = np.zeros(n)
    Z = np.zeros((n, N * nu))
    dx = -e1[:nx]
    gam = np.zeros((nx, N * nu))
    w[:nx] = dx
    for k in range(N):
        Z[k * nz + nx:(k + 1) * nz, k * nu:(k + 1) * nu] = np.eye(nu)
        dx = st.A[k] @ dx - e1[(k + 1) * nx:(k + 2) * nx]
        gam = st.A[k] @ gam
        gam[:, k * nu:(k + 1) * nu] += st.B[k]
        r = (k + 1) * nz
        w[r:r + nx] = dx
        Z[r:r + nx] = gam
    return w, Z


def _shooting_multipliers(st: ShootingStructure, s: np.ndarray) -> np.ndarray:
    """Backward recursion on the state columns of the initial/continuity rows."""
    N, nx, nu = st.N, st.n_x, st.n_u
    nz = nx + nu
    lam = np.zeros((N + 1, nx))
    lam[N] = s[N * nz:N * nz + nx]
    for k in range(N - 1, -1, -1):
        lam[k] = s[k * nz:k * nz + nx] + st.A[k].T @ lam[k + 1]
    return lam.ravel()


# --------------------------------------------------------------------------
# active-set loop on the reduced problem


def _nullspace_of_rows(G: np.ndarray, p: int):
    """Orthonormal null space of the rows of ``G`` and its QR factors."""
    if G.shape[0] == 0:
        return None, None, None
    Q, R = np.linalg.qr(G.T, mode="complete")
    k = G.shape[0]
    return Q[:, k:], Q[:, :k], R[:k, :k]


def _independent_rows(G: np.ndarray, rows: list[int], tol: float) -> list[int]:
    if not rows:
        return []
    Gs = G[rows]
    _, R, piv = sla.qr(Gs.T, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    keep = d > tol * max(1.0, d[0] if d.size else 1.0)
    return sorted(rows[i] for i in piv[: int(np.sum(keep))])


class _Reduced:
    def __init__(self, H, g, G, r, convex=False):
        self.H, self.g, self.G, self.r = H, g, G, r
        self.p = g.size
        self.convex = convex


def _eqp(red: _Reduced, y: np.ndarray, W: list[int], tol: float):
    """Newton step from ``y`` on the working set, or None on nonpositive curvature."""
    p = red.p
    grad = red.H @ y + red.g
    GW = red.G[W] if W else np.zeros((0, p))
    Z2, Q1, R1 = _nullspace_of_rows(GW, p)
    if Z2 is None:
        Z2 = None
        Hz = red.H
    else:
        Hz = Z2.T @ red.H @ Z2
    if Hz.shape[0] == 0:
        return np.zeros(p), (Q1, R1), np.inf
    Hz = 0.5 * (Hz + Hz.T)
    try:
        cf = sla.cho_factor(Hz, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        return None, (Q1, R1), -np.inf
    dmin = float(np.min(np.diag(cf[0]))) ** 2
    # pivots below the Cholesky backward-error level carry no curvature information
    # unless the Hessian is known to be semidefinite
    floor = 0.0 if red.convex else 10.0 * Hz.shape[0] * EPS * max(1.0, float(np.max(np.abs(np.diag(Hz)))))
    if not dmin > floor:
        return None, (Q1, R1), dmin
    rhs = grad if Z2 is None else Z2.T @ grad
    s = -sla.cho_solve(cf, rhs, check_finite=False)
    if Z2 is not None:
        s = Z2 @ s
    return s, (Q1, R1), dmin


def _working_multipliers(red: _Reduced, y, W, factors):
    if not W:
        return np.zeros(0)
    grad = red.H @ y + red.g
    Q1, R1 = factors
    return sla.solve_triangular(R1, Q1.T @ grad)


def _phase_one(red: _Reduced, y_ref: np.ndarray, usable: np.ndarray):
    """Feasible point closest to ``y_ref`` in the 1-norm."""
    p = red.p
    idx = np.flatnonzero(usable)
    G = red.G[idx]
    m = idx.size
    I = sp.identity(p, format="csr")
    A_ub = sp.vstack([
        sp.hstack([I, -I]),
        sp.hstack([-I, -I]),
        sp.hstack([sp.csr_matrix(-G), sp.csr_matrix((m, p))]),
    ], format="csr")
    b_ub = np.concatenate([y_ref, -y_ref, red.r[idx]])
    cost = np.concatenate([np.zeros(p), np.ones(p)])
    bounds = [(None, None)] * p + [(0, None)] * p
    res = linprog(cost, A_ub=A_ub, b_ub=b_ub, bounds=bounds, method="highs")
    if res.status != 0:
        return None
    return res.x[:p]


def _solve_reduced(red: _Reduced, hint, tol: float, max_iter: int):
    p, m = red.p, red.r.size
    rownorm = np.linalg.norm(red.G, axis=1) if m else np.zeros(0)
    gscale = max(1.0, float(np.max(rownorm))) if m else 1.0
    usable = rownorm > 1e-13 * gscale
    rscale = max(1.0, float(np.max(np.abs(red.r)))) if m else 1.0
    feas_tol = tol * rscale
    if m and np.any(red.r[~usable] < -feas_tol):
        return None, [], INFEASIBLE, 0, "constant inequality row violated", None

    def violation(y):
        if not m:
            return 0.0
        v = red.G[usable] @ y + red.r[usable]
        return float(max(0.0, -np.min(v))) if v.size else 0.0

    W = [i for i in sorted(set(hint or ())) if 0 <= i < m and usable[i]]
    W = _independent_rows(red.G, W, 1e-10)
    # equality-QP start on the hinted working set
    y = np.zeros(p)
    if W:
        _, Q1, R1 = _nullspace_of_rows(red.G[W], p)
        y = Q1 @ sla.solve_triangular(R1.T, -red.r[W], lower=True)
    start = None
    s, fac, last_eig = _eqp(red, y, W, tol)
    need_step = True
    if s is not None:
        y_eq = y + s
        if violation(y_eq) <= feas_tol:
            start = y_eq
            need_step = False
    if start is None:
        y_ref = y if s is None else y + s
        y0 = _phase_one(red, y_ref, usable) if m else y_ref
        if y0 is None:
            return None, [], INFEASIBLE, 0, "inequality constraints are infeasible", None
        act = np.abs(red.G @ y0 + red.r) <= 1e3 * feas_tol
        W = _independent_rows(red.G, [int(i) for i in np.flatnonzero(act & usable)][:p], 1e-10)
        start = y0
    y = start
    changes = 0
    for _ in range(max_iter):
        if need_step:
            s, fac, last_eig = _eqp(red, y, W, tol)
            if s is None:
                return y, W, NONCONVEX, changes, "nonpositive curvature on the working set", last_eig
            ynorm = 1.0 + float(np.max(np.abs(y)))
            if float(np.max(np.abs(s))) > 1e-13 * ynorm:
                Gs = red.G @ s if m else np.zeros(0)
                alpha, block = 1.0, -1
                if m:
                    inW = np.zeros(m, bool)
                    inW[W] = True
                    cand = np.flatnonzero(~inW & usable & (Gs < -1e-14 * gscale * float(np.max(np.abs(s)))))
                    if cand.size:
                        slack = np.maximum(red.G[cand] @ y + red.r[cand], 0.0)
                        ratios = slack / -Gs[cand]
                        j = int(np.argmin(ratios))  # argmin returns the lowest index on ties
                        if ratios[j] < 1.0:
                            alpha, block = float(ratios[j]), int(cand[j])
                y = y + alpha * s
                if block >= 0:
                    W = sorted(W + [block])
                    changes += 1
                    continue
        mu_W = _working_multipliers(red, y, W, fac)
        mscale = 1.0 + float(np.max(np.abs(red.H @ y + red.g)))
        if not W or float(np.min(mu_W)) >= -tol * mscale:
            mu = np.zeros(m)
            if W:
                mu[W] = np.maximum(mu_W, 0.0)
            return y, W, OPTIMAL, changes, "", last_eig
        j = int(np.argmin(mu_W))
        W = W[:j] + W[j + 1:]
        changes += 1
        need_step = True
    return y, W, MAX_ITER, changes, "active-set iteration limit reached", last_eig


def solve_qp(data: QpData, hint=None, tol: float = 1e-11, max_iter: int | None = None) -> QpSolution:
    """Solve a convex QP; ``hint`` is an iterable of inequality indices to start from."""
    n = data.n
    m_in = data.c.size
    elim = _Elimination(data, tol)
    if not elim.feasible:
        return QpSolution(np.zeros(n), np.zeros(data.e.size), np.zeros(m_in), (), INFEASIBLE,
                          message="equality constraints are inconsistent")
    Z, w0 = elim.Z, elim.w0
    LZ = data.hess_matmul(Z)
    Hr = Z.T @ LZ
    Hr = 0.5 * (Hr + Hr.T)
    gr = Z.T @ (data.hess_matmul(w0) + data.gradient)
    if m_in:
        G = data.C @ Z
        G = np.asarray(G)
        r = data.C @ w0 + data.c
    else:
        G = np.zeros((0, Z.shape[1]))
        r = np.zeros(0)
    red = _Reduced(Hr, gr, G, np.asarray(r).ravel(), data.convex)
    if max_iter is None:
        max_iter = 50 + 5 * (red.p + m_in)
    y, W, status, changes, msg, eig = _solve_reduced(red, hint, tol, max_iter)
    if y is None:
        return QpSolution(np.zeros(n), np.zeros(data.e.size), np.zeros(m_in), (), status, changes, msg)
    w = w0 + Z @ y
    mu = np.zeros(m_in)
    if W and status in (OPTIMAL, MAX_ITER):
        GW = G[W]
        grad = Hr @ y + gr
        mu_W = np.linalg.lstsq(GW.T, grad, rcond=None)[0]
        mu[W] = np.maximum(mu_W, 0.0)
    s = data.hess_matmul(w) + data.gradient - (data.C.T @ mu if m_in else 0.0)
    lam = elim.equality_multipliers(data, s) if data.e.size else np.zeros(0)
    return QpSolution(w, lam, mu, tuple(W), status, changes, msg, eig)
