"""Offline convexification of the economic Hessian at the optimal steady state.

Solves the small semidefinite program

    min  beta + rho1 ||F|| + rho2 ||G||
    s.t. I <= alpha H + R(dP) + eta Ca' F Ca <= beta I
         I <= alpha Hf - dP - eta Da' G Da   <= beta I

with ``R(dP) = [[A'dP A - dP, A'dP B], [B'dP A, B'dP B]]`` with a primal-dual
conic interior-point method, rescales the result so that the lower bounds
hold exactly in double precision, and returns the blocks divided by
``alpha``. Norms are Frobenius norms.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from cvxopt import matrix, solvers

from .qpsolver import BlockDiagonal
from .transcription import OcpNlp, OcpSpec, SteadyState, _stage_point, steady_iterate

ACTIVE_TOL = 1e-8


@dataclass(frozen=True)
class SteadyLinearization:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    active: np.ndarray
    active_terminal: np.ndarray

    @property
    def C_active(self) -> np.ndarray:
        return self.C[self.active]

    @property
    def D_active(self) -> np.ndarray:
        return self.D[self.active_terminal]


def steady_hessians(ocp: OcpSpec, ss: SteadyState):
    """``H`` = Hessian of the steady-state Lagrangian, ``H_f`` = Hessian of ``V_f`` at ``x_s``."""
    nx, nu = ocp.n_x, ocp.n_u
    nz = nx + nu
    w = ss.w
    p = np.asarray(ss.params, float)
    H = ocp.stage_cost.weighted_hessian(_stage_point(ocp.stage_cost, w, p), [1.0], n_diff=nz)
    H = H + ocp.dynamics.f.weighted_hessian(w, ss.lam)
    if ocp.path_constraints is not None:
        h = ocp.path_constraints
        H = H + h.weighted_hessian(_stage_point(h, w, p), -ss.mu, n_diff=nz)
    if ocp.terminal_cost is not None:
        V = ocp.terminal_cost
        Hf = V.weighted_hessian(_stage_point(V, ss.x, p), [1.0], n_diff=nx)
    else:
        Hf = np.zeros((nx, nx))
    return 0.5 * (H + H.T), 0.5 * (Hf + Hf.T)


def steady_linearization(ocp: OcpSpec, ss: SteadyState, nu_s=None, tol: float = ACTIVE_TOL) -> SteadyLinearization:
    """Jacobians at the steady state and the strictly active sets.

    Terminal equality rows always count as active; terminal inequality rows
    count when their multiplier in ``nu_s`` exceeds ``tol``.
    """
    nx, nu = ocp.n_x, ocp.n_u
    nz = nx + nu
    w = ss.w
    p = np.asarray(ss.params, float)
    J = ocp.dynamics.f.jacobian(w)
    A, B = J[:, :nx], J[:, nx:]
    if ocp.path_constraints is not None:
        h = ocp.path_constraints
        C = h.jacobian(_stage_point(h, w, p), n_diff=nz)
        active = np.flatnonzero(ss.mu > tol)
    else:
        C = np.zeros((0, nz))
        active = np.zeros(0, int)
    if ocp.terminal_constraints is not None:
        g = ocp.terminal_constraints
        D = g.jacobian(_stage_point(g, ss.x, p), n_diff=nx)
        kinds = np.array(ocp.terminal_kinds)
        nu_s = np.zeros(D.shape[0]) if nu_s is None else np.asarray(nu_s, float)
        active_f = np.flatnonzero((kinds == "eq") | (nu_s > tol))
    else:
        D = np.zeros((0, nx))
        active_f = np.zeros(0, int)
    return SteadyLinearization(A, B, C, D, active, active_f)


def rotation_operator(dP, A, B) -> np.ndarray:
    dP = np.asarray(dP, float)
    A = np.asarray(A, float)
    B = np.asarray(B, float)
    top = np.hstack([A.T @ dP @ A - dP, A.T @ dP @ B])
    bot = np.hstack([B.T @ dP @ A, B.T @ dP @ B])
    R = np.vstack([top, bot])
    return 0.5 * (R + R.T)


# --------------------------------------------------------------------------
# certificate


@dataclass
class SdpCertificate:
    dP: np.ndarray
    F: np.ndarray
    G: np.ndarray
    alpha: float
    beta: float
    rho1: float
    rho2: float
    eta: int
    H: np.ndarray
    Hf: np.ndarray | None
    A: np.ndarray
    B: np.ndarray
    Ca: np.ndarray
    Da: np.ndarray
    iterations: int = 0

    def stage_matrix(self) -> np.ndarray:
        X = self.alpha * self.H + rotation_operator(self.dP, self.A, self.B)
        if self.eta and self.Ca.size:
            X = X + self.Ca.T @ self.F @ self.Ca
        return 0.5 * (X + X.T)

    def terminal_matrix(self) -> np.ndarray | None:
        if self.Hf is None:
            return None
        X = self.alpha * self.Hf - self.dP
        if self.eta and self.Da.size:
            X = X - self.Da.T @ self.G @ self.Da
        return 0.5 * (X + X.T)

    def margins(self) -> dict:
        """Eigenvalue margins of the four matrix inequalities (nonnegative when satisfied)."""
        ev = np.linalg.eigvalsh(self.stage_matrix())
        out = {"stage_lower": float(ev[0] - 1.0), "stage_upper": float(self.beta - ev[-1])}
        Xf = self.terminal_matrix()
        if Xf is not None:
            ef = np.linalg.eigvalsh(Xf)
            out["terminal_lower"] = float(ef[0] - 1.0)
            out["terminal_upper"] = float(self.beta - ef[-1])
        return out

    def objective(self) -> float:
        return self.beta + self.rho1 * float(np.linalg.norm(self.F)) + self.rho2 * float(np.linalg.norm(self.G))


def verify_certificate(cert: SdpCertificate, tol: float = 1e-6) -> bool:
    return cert.alpha > 0 and all(v >= -tol for v in cert.margins().values())


@dataclass
class ConvexHessian:
    """Fixed blocks ``M`` (stage) and ``M_f`` (terminal), already divided by ``alpha``.

    ``states`` lists the state coordinates the SDP was posed on; the blocks
    are zero in the remaining (cyclic) state rows and columns.
    """

    M: np.ndarray
    M_f: np.ndarray
    certificate: SdpCertificate
    states: np.ndarray = field(default_factory=lambda: np.zeros(0, int))

    def blocks(self, N: int) -> BlockDiagonal:
        return BlockDiagonal(np.broadcast_to(self.M, (N,) + self.M.shape), self.M_f)

    def to_json(self, path=None) -> str:
        c = self.certificate
        doc = {
            "M": self.M.tolist(), "M_f": self.M_f.tolist(), "states": [int(i) for i in self.states],
            "certificate": {
                "dP": c.dP.tolist(), "F": c.F.tolist(), "G": c.G.tolist(), "alpha": c.alpha, "beta": c.beta,
                "rho1": c.rho1, "rho2": c.rho2, "eta": c.eta, "H": c.H.tolist(),
                "Hf": None if c.Hf is None else c.Hf.tolist(), "A": c.A.tolist(), "B": c.B.tolist(),
                "Ca": c.Ca.tolist(), "Da": c.Da.tolist(), "iterations": c.iterations,
            },
            "margins": c.margins(),
        }
        text = json.dumps(doc, indent=1, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_json(cls, text: str) -> "ConvexHessian":
        doc = json.loads(text)
        c = doc["certificate"]

        def arr(v, ncol=0):
            a = np.array(v, float)
            return a.reshape(0, ncol) if a.size == 0 else a
        H = np.array(c["H"])
        nx = len(c["A"])
        cert = SdpCertificate(np.array(c["dP"]), arr(c["F"]), arr(c["G"]), c["alpha"], c["beta"], c["rho1"],
                              c["rho2"], c["eta"], H, None if c["Hf"] is None else np.array(c["Hf"]),
                              np.array(c["A"]), arr(c["B"]), arr(c["Ca"], H.shape[0]), arr(c["Da"], nx),
                              c["iterations"])
        return cls(np.array(doc["M"]), np.array(doc["M_f"]), cert, np.array(doc["states"], int))


class ConvexificationError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# cutting-plane SDP


def _sym_basis(n: int) -> list[np.ndarray]:
    out = []
    for i in range(n):
        for j in range(i, n):
            E = np.zeros((n, n))
            E[i, j] = E[j, i] = 1.0
            out.append(E)
    return out


def solve_convexification(H, H_f, lin: SteadyLinearization, rho1: float = 1e-2, rho2: float = 1e-2,
                          eta: int | None = None, tol: float = 1e-9, max_iter: int = 200) -> ConvexHessian:
    """Solve the convexification SDP; ``H_f=None`` drops the terminal pair."""
    H = 0.5 * (np.asarray(H, float) + np.asarray(H, float).T)
    A, B = np.asarray(lin.A, float), np.asarray(lin.B, float)
    nx, nu = B.shape
    nz = nx + nu
    if H.shape != (nz, nz):
        raise ValueError("H must be (n_x + n_u) square")
    Ca = np.asarray(lin.C_active, float).reshape(-1, nz)
    Da = np.asarray(lin.D_active, float).reshape(-1, nx)
    if eta is None:
        eta = 1 if Ca.shape[0] else 0
    if eta not in (0, 1):
        raise ValueError("eta must be 0 or 1")
    terminal = H_f is not None
    Hf = None if not terminal else 0.5 * (np.asarray(H_f, float) + np.asarray(H_f, float).T)
    na = Ca.shape[0] if eta else 0
    nf = Da.shape[0] if (eta and terminal) else 0

    bP, bF, bG = _sym_basis(nx), _sym_basis(na), _sym_basis(nf)
    nP, nF, nG = len(bP), len(bF), len(bG)
    iP, iF, iG = 0, nP, nP + nF
    ia, ib, isF, isG = nP + nF + nG, nP + nF + nG + 1, nP + nF + nG + 2, nP + nF + nG + 3
    n = isG + 1
    # X1(theta) and X2(theta) as linear maps: basis tensors
    X1b = np.zeros((n, nz, nz))
    X2b = np.zeros((n, nx, nx))
    for i, E in enumerate(bP):
        X1b[iP + i] = rotation_operator(E, A, B)
        X2b[iP + i] = -E
    for i, E in enumerate(bF):
        X1b[iF + i] = Ca.T @ E @ Ca
    for i, E in enumerate(bG):
        X2b[iG + i] = -Da.T @ E @ Da
    X1b[ia] = H
    if terminal:
        X2b[ia] = Hf

    def mats(theta):
        X1 = np.einsum("n,nij->ij", theta, X1b)
        X2 = np.einsum("n,nij->ij", theta, X2b) if terminal else None
        return 0.5 * (X1 + X1.T), (None if X2 is None else 0.5 * (X2 + X2.T))

    # conic form for cvxopt: G theta + s = h with s in R+ x SOC x PSD cones
    c = np.zeros(n)
    c[ib] = 1.0
    c[isF] = rho1
    c[isG] = rho2
    G_blocks, h_blocks = [], []
    row = np.zeros((1, n))
    row[0, ia] = -1.0
    G_blocks.append(row)
    h_blocks.append(np.zeros(1))
    soc_dims = []
    for basis, off, m, slack in ((bF, iF, na, isF), (bG, iG, nf, isG)):
        if not basis:
            continue
        Gq = np.zeros((1 + m * m, n))
        Gq[0, slack] = -1.0
        for i, E in enumerate(basis):
            Gq[1:, off + i] = -E.ravel(order="F")
        G_blocks.append(Gq)
        h_blocks.append(np.zeros(1 + m * m))
        soc_dims.append(1 + m * m)
    sdp_dims, lower = [], []
    for Xb, m, on in ((X1b, nz, True), (X2b, nx, terminal)):
        if not on:
            continue
        vecs = Xb.reshape(n, m * m).T
        eye = np.eye(m).ravel(order="F")
        G_blocks.append(-vecs)              # X - floor I >= 0
        h_blocks.append(-eye)
        lower.append(len(h_blocks) - 1)
        upper = vecs.copy()                 # beta I - X >= 0
        upper[:, ib] -= eye
        G_blocks.append(upper)
        h_blocks.append(np.zeros(m * m))
        sdp_dims += [m, m]
    pins = [i for i, used in ((isF, nF), (isG, nG)) if not used]
    Aeq = np.zeros((len(pins), n))
    for r, i in enumerate(pins):
        Aeq[r, i] = 1.0
    dims = {"l": 1, "q": soc_dims, "s": sdp_dims}
    Gm = matrix(np.vstack(G_blocks))

    def conelp(floor):
        hs = [floor * h if k in lower else h for k, h in enumerate(h_blocks)]
        sol, err = None, None
        # the final rescale restores exact feasibility, so a looser tolerance is an acceptable fallback
        for t in (tol, 10 * tol, 100 * tol, 1e3 * tol):
            opts = {"show_progress": False, "maxiters": max_iter, "abstol": t, "reltol": t, "feastol": t}
            try:
                return solvers.conelp(matrix(c), Gm, matrix(np.concatenate(hs)), dims,
                                      matrix(Aeq) if pins else None, matrix(np.zeros(len(pins))) if pins else None,
                                      options=opts), None
            except (ValueError, ArithmeticError) as exc:
                err = exc
        return sol, err

    # every term is linear in theta, so the problem with lower bound floor * I is the original one
    # scaled by floor; badly scaled inputs push the solution to large magnitudes that the
    # infeasibility test of the interior-point method misreads, and a smaller floor recentres it
    for floor in (1.0, 1e-3, 1e-6):
        sol, err = conelp(floor)
        if sol is not None and sol["status"] not in ("primal infeasible", "dual infeasible") \
                and sol["x"] is not None:
            break
    if sol is None:
        raise ConvexificationError(f"conic solver failed: {err}") from err
    it = int(sol["iterations"])
    if sol["status"] in ("primal infeasible", "dual infeasible") or sol["x"] is None:
        raise ConvexificationError(f"convexification problem is {sol['status']}: the steady state admits "
                                   "no rotation making the Hessian positive definite")
    theta = np.array(sol["x"]).ravel()
    X1, X2 = mats(theta)
    lmin = np.linalg.eigvalsh(X1)[0]
    if terminal:
        lmin = min(lmin, np.linalg.eigvalsh(X2)[0])
    if not lmin > 0:
        worst = "stage" if not terminal or np.linalg.eigvalsh(X1)[0] <= np.linalg.eigvalsh(X2)[0] else "terminal"
        raise ConvexificationError(f"solver returned {sol['status']} without a positive-definite point; "
                                   f"most violated: {worst} lower bound (lambda_min = {lmin:.3e})")
    best = _rescaled(theta, lmin, X1, X2, ia, ib, isF, isG, nP, nF, nG, rho1, rho2, bP, bF, bG)
    _, th = best
    dP = sum(v * E for v, E in zip(th[iP:iP + nP], bP))
    F = sum((v * E for v, E in zip(th[iF:iF + nF], bF)), np.zeros((na, na)))
    G = sum((v * E for v, E in zip(th[iG:iG + nG], bG)), np.zeros((nf, nf)))
    cert = SdpCertificate(np.asarray(dP, float), F, G, float(th[ia]), float(th[ib]), rho1, rho2, int(eta), H, Hf,
                          A, B, Ca[:na] if eta else np.zeros((0, nz)), Da[:nf] if (eta and terminal) else np.zeros((0, nx)),
                          it)
    X1 = cert.stage_matrix()
    M = X1 / cert.alpha
    X2 = cert.terminal_matrix()
    M_f = np.zeros((nx, nx)) if X2 is None else X2 / cert.alpha
    return ConvexHessian(M, M_f, cert, np.arange(nx))



def _rescaled(theta, lmin, X1, X2, ia, ib, isF, isG, nP, nF, nG, rho1, rho2, bP, bF, bG):
    """Scale a positive-definite iterate so that both lower inequalities hold exactly."""
    s = 1.0 / lmin if lmin < 1.0 else 1.0
    th = theta * s
    ev = [np.linalg.eigvalsh(s * X1)[-1]]
    if X2 is not None:
        ev.append(np.linalg.eigvalsh(s * X2)[-1])
    th[ib] = max(ev)
    iF = nP
    iG = nP + nF
    F = sum((v * E for v, E in zip(th[iF:iF + nF], bF)), 0.0)
    G = sum((v * E for v, E in zip(th[iG:iG + nG], bG)), 0.0)
    th[isF] = float(np.linalg.norm(F)) if nF else 0.0
    th[isG] = float(np.linalg.norm(G)) if nG else 0.0
    obj = th[ib] + rho1 * th[isF] + rho2 * th[isG]
    return obj, th


def convexify_steady_state(ocp: OcpSpec, ss: SteadyState, rho1: float = 1e-2, rho2: float = 1e-2,
                           eta: int | None = None, terminal: bool = True, H_f=None, nu_s=None,
                           **kwargs) -> ConvexHessian:
    """Assemble ``H``, ``H_f`` and the linearization, drop cyclic states, solve, and embed.

    Cyclic states (e.g. a travelled distance that no cost or active
    constraint depends on) have an identically zero row in ``H`` and in any
    rotation term, so the SDP is posed on the remaining coordinates and the
    returned blocks are zero in the cyclic rows and columns.
    """
    H, Hf_auto = steady_hessians(ocp, ss)
    lin = steady_linearization(ocp, ss, nu_s)
    Hf = Hf_auto if H_f is None else np.asarray(H_f, float)
    nx, nu = ocp.n_x, ocp.n_u
    keep_x = np.setdiff1d(np.arange(nx), np.asarray(ss.cyclic_states, int))
    keep_w = np.concatenate([keep_x, nx + np.arange(nu)])
    if keep_x.size < nx:
        drop = np.setdiff1d(np.arange(nx), keep_x)
        if np.any(np.abs(H[drop]) > 1e-12 * max(1.0, np.max(np.abs(H)))):
            raise ConvexificationError("cyclic states carry curvature in H")
        if lin.active.size and np.any(lin.C_active[:, drop] != 0):
            raise ConvexificationError("a strictly active constraint depends on a cyclic state")
        lin = SteadyLinearization(lin.A[np.ix_(keep_x, keep_x)], lin.B[keep_x], lin.C[:, keep_w],
                                  lin.D[:, keep_x], lin.active, lin.active_terminal)
    res = solve_convexification(H[np.ix_(keep_w, keep_w)], Hf[np.ix_(keep_x, keep_x)] if terminal else None,
                                lin, rho1, rho2, eta, **kwargs)
    M = np.zeros((nx + nu, nx + nu))
    M[np.ix_(keep_w, keep_w)] = res.M
    M_f = np.zeros((nx, nx))
    M_f[np.ix_(keep_x, keep_x)] = res.M_f
    return ConvexHessian(M, M_f, res.certificate, keep_x)


# --------------------------------------------------------------------------
# reduced Hessian comparison


class LicqError(RuntimeError):
    pass


def active_constraint_jacobian(nlp: OcpNlp, ss: SteadyState, z=None, tol: float = ACTIVE_TOL) -> np.ndarray:
    """Jacobian of initial, dynamics, strictly active path and active terminal rows at the steady trajectory."""
    if z is None:
        z = steady_iterate(nlp, ss)
    lin = nlp.linearize(z.w)
    E = lin.E.toarray()
    rows = [E[: (nlp.N + 1) * nlp.n_x]]
    nh = nlp.n_h
    if nh:
        Cd = lin.C.toarray()
        act = np.flatnonzero(ss.mu > tol)
        for k in range(nlp.N):
            for i in act:
                r = Cd[k * nh + i]
                if k == 0 and not np.any(r[nlp.u_index(0)]):
                    continue  # implied by the initial-value rows
                rows.append(r[None])
    nte = nlp.term_eq.size
    if nte:
        rows.append(E[(nlp.N + 1) * nlp.n_x:])
    if nlp.term_in.size:
        Cd = lin.C.toarray()
        nu_in = np.asarray(z.nu, float)[nlp.term_in]
        sel = np.flatnonzero(nu_in > tol)
        if sel.size:
            rows.append(Cd[nlp.N * nh + sel])
    return np.vstack(rows)


def reduced_hessian_check(nlp: OcpNlp, M_blocks, H_blocks, ss: SteadyState, z=None) -> float:
    """``||Z'(M - H)Z||_F / ||Z'HZ||_F`` with ``Z`` spanning the null space of the active Jacobian."""
    J = active_constraint_jacobian(nlp, ss, z)
    s = np.linalg.svd(J, compute_uv=False)
    rank = int(np.sum(s > 1e-10 * s[0]))
    if rank < J.shape[0]:
        raise LicqError(f"active constraint Jacobian has rank {rank} < {J.shape[0]} rows")
    Z = sla.null_space(J)
    Mz = M_blocks @ Z
    Hz = H_blocks @ Z
    num = np.linalg.norm(Z.T @ (Mz - Hz))
    den = np.linalg.norm(Z.T @ Hz)
    if den == 0:
        return float(num)
    return float(num / den)
