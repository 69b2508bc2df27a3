"""Explicit RK4 discretisation unrolled into the expression graph."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .symbolic import Function, symbols


@dataclass(frozen=True)
class DiscreteDynamics:
    """State transition map ``x_next = f(x, u)``.

    ``dt`` and ``sub_steps`` are informational for maps built by
    :func:`discretize_rk4`; maps given directly in discrete time carry
    ``sub_steps = 0``.
    """

    f: Function
    n_x: int
    n_u: int
    dt: float = 1.0
    sub_steps: int = 0

    def __post_init__(self):
        if self.f.n_out != self.n_x:
            raise ValueError(f"dynamics output dimension {self.f.n_out} != n_x = {self.n_x}")
        if self.f.n_in != self.n_x + self.n_u:
            raise ValueError(f"dynamics input dimension {self.f.n_in} != n_x + n_u = {self.n_x + self.n_u}")

    @classmethod
    def from_callable(cls, fn, n_x: int, n_u: int, dt: float = 1.0, name: str = "f") -> "DiscreteDynamics":
        f = Function.from_callable(name, fn, [("x", n_x), ("u", n_u)])
        return cls(f, n_x, n_u, dt, 0)

    def __call__(self, x, u) -> np.ndarray:
        return self.f(x, u)


def discretize_rk4(f_c: Function, dt: float, sub_steps: int = 1, name: str | None = None) -> DiscreteDynamics:
    """Compose ``sub_steps`` classical RK4 steps of length ``dt / sub_steps``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    if sub_steps < 1:
        raise ValueError("sub_steps must be >= 1")
    if len(f_c.inputs) != 2:
        raise ValueError("continuous dynamics must take inputs (x, u)")
    n_x, n_u = f_c.inputs[0][1], f_c.inputs[1][1]
    if f_c.n_out != n_x:
        raise ValueError(f"continuous dynamics map to {f_c.n_out} outputs, expected {n_x}")

    h = dt / sub_steps
    x = symbols(n_x)
    u = symbols(n_u, n_x)
    xk = x
    for _ in range(sub_steps):
        k1 = f_c.call(xk, u)
        k2 = f_c.call(xk + (h / 2) * k1, u)
        k3 = f_c.call(xk + (h / 2) * k2, u)
        k4 = f_c.call(xk + h * k3, u)
        xk = xk + (h / 6) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    f = Function(name or f"rk4_{f_c.name}", [("x", n_x), ("u", n_u)], list(xk))
    return DiscreteDynamics(f, n_x, n_u, float(dt), int(sub_steps))


def step_with_sensitivities(dyn: DiscreteDynamics, x, u):
    """Return ``(x_next, A, B)`` with ``A = d x_next / d x`` and ``B = d x_next / d u``."""
    x = np.asarray(x, float)
    u = np.asarray(u, float)
    if x.shape[-1] != dyn.n_x or u.shape[-1] != dyn.n_u:
        raise ValueError("state/control dimensions do not match the dynamics")
    d = dyn.f.derivatives(np.concatenate([x, u], axis=-1), order=1)
    J = d.jacobian
    return d.value, J[..., : dyn.n_x], J[..., dyn.n_x:]


def integrate_stage_cost(f_c: Function, l_c: Function, dt: float, sub_steps: int = 1,
                         name: str | None = None) -> Function:
    """Interval mean ``(1/dt) * int_0^dt l(x(t), u[, p]) dt`` by the same RK4 steps as :func:`discretize_rk4`.

    ``l_c`` takes ``(x, u)`` or ``(x, u, p)``; the result has the same inputs.
    Costs that reward the product of a state and the input that drives it are
    only dissipative in discrete time when the intra-interval response is
    accounted for, which point evaluation at the interval start misses.
    """
    if not dt > 0 or sub_steps < 1:
        raise ValueError("dt must be positive and sub_steps >= 1")
    n_x, n_u = f_c.inputs[0][1], f_c.inputs[1][1]
    if [d for _, d in l_c.inputs[:2]] != [n_x, n_u] or l_c.n_out != 1:
        raise ValueError("stage cost must be scalar with inputs (x, u[, p]) matching the dynamics")
    n_p = l_c.inputs[2][1] if len(l_c.inputs) > 2 else 0
    h = dt / sub_steps
    x = symbols(n_x)
    u = symbols(n_u, n_x)
    p = symbols(n_p, n_x + n_u) if n_p else None

    def ell(xx):
        return l_c.call(xx, u, p)[0] if n_p else l_c.call(xx, u)[0]

    xk, q = x, 0.0
    for _ in range(sub_steps):
        k1 = f_c.call(xk, u)
        x2 = xk + (h / 2) * k1
        k2 = f_c.call(x2, u)
        x3 = xk + (h / 2) * k2
        k3 = f_c.call(x3, u)
        x4 = xk + h * k3
        k4 = f_c.call(x4, u)
        q = q + (h / 6) * (ell(xk) + 2.0 * ell(x2) + 2.0 * ell(x3) + ell(x4))
        xk = xk + (h / 6) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return Function(name or f"mean_{l_c.name}", list(l_c.inputs), [q / dt])
