"""Discrete-time LQR by fixed-point Riccati iteration."""
from __future__ import annotations

import numpy as np


class RiccatiError(RuntimeError):
    pass


def riccati_residual(P, A, B, Q, R, S=None) -> float:
    S = np.zeros((A.shape[0], B.shape[1])) if S is None else S
    K_num = A.T @ P @ B + S
    rhs = Q + A.T @ P @ A - K_num @ np.linalg.solve(R + B.T @ P @ B, K_num.T)
    return float(np.max(np.abs(rhs - P)))


def lqr_gain(P, A, B, R, S=None) -> np.ndarray:
    """``K`` with ``u = -K x``."""
    S = np.zeros((A.shape[0], B.shape[1])) if S is None else S
    return np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A + S.T)


def lqr_terminal(A, B, Q, R, S=None, tol: float = 1e-12, max_iter: int = 200000) -> np.ndarray:
    """Cost-to-go ``P`` of ``sum x'Qx + 2x'Su + u'Ru`` under ``x+ = Ax + Bu``.

    Iterates the Riccati recursion from ``P = Q`` until the relative update
    falls below ``tol``; a growing iterate means (A, B) is not stabilizable.
    """
    A = np.atleast_2d(np.asarray(A, float))
    B = np.atleast_2d(np.asarray(B, float))
    Q = np.atleast_2d(np.asarray(Q, float))
    R = np.atleast_2d(np.asarray(R, float))
    S = np.zeros((A.shape[0], B.shape[1])) if S is None else np.atleast_2d(np.asarray(S, float))
    if np.min(np.linalg.eigvalsh(0.5 * (R + R.T))) <= 0:
        raise ValueError("R must be positive definite")
    P = Q.copy()
    scale = max(1.0, float(np.max(np.abs(Q))))
    for _ in range(max_iter):
        K_num = A.T @ P @ B + S
        P_new = Q + A.T @ P @ A - K_num @ np.linalg.solve(R + B.T @ P @ B, K_num.T)
        P_new = 0.5 * (P_new + P_new.T)
        if not np.all(np.isfinite(P_new)) or np.max(np.abs(P_new)) > 1e14 * scale:
            raise RiccatiError("Riccati iteration diverged: (A, B) is not stabilizable")
        delta = float(np.max(np.abs(P_new - P)))
        P = P_new
        if delta <= tol * max(1.0, float(np.max(np.abs(P)))):
            return P
    raise RiccatiError(f"Riccati iteration did not converge in {max_iter} steps")
