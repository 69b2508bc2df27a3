"""Benchmark plants: the evaporation process and a planar electric vehicle."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from ..convexify import ConvexHessian, convexify_steady_state, steady_hessians, steady_linearization
from ..integrator import DiscreteDynamics, discretize_rk4, integrate_stage_cost
from ..symbolic import Expr, Function, symbols
from ..transcription import (OcpNlp, OcpSpec, SteadyState, StorageFunction, build_nlp, kkt_residual, rotate,
                             shift_costs, solve_sop, steady_iterate)
from .lqr import lqr_terminal


class PlantValidationError(RuntimeError):
    pass


@dataclass
class PlantBundle:
    """Everything a controller needs for one benchmark.

    ``ocp`` is the economic problem with the stage cost shifted to vanish at
    the steady state; ``meter`` is the physical (unshifted) stage cost used
    to score closed loops.
    """

    name: str
    ocp: OcpSpec
    ss: SteadyState
    convex: ConvexHessian
    meter: Function
    tracking_ocp: OcpSpec
    letempc_ocp: OcpSpec
    dt: float
    N_sim: int
    H: np.ndarray
    H_f: np.ndarray
    reference: Callable | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def ell_s(self) -> float:
        """Physical stage cost at the steady state."""
        return self.ss.ell_offset

    def nlp(self, x_hat0=None, kind: str = "economic", N: int | None = None, params=None) -> OcpNlp:
        ocp = {"economic": self.ocp, "tracking": self.tracking_ocp, "letempc": self.letempc_ocp}[kind]
        if N is not None:
            ocp = ocp.with_horizon(N)
        x_hat0 = self.ss.x if x_hat0 is None else x_hat0
        if params is None and ocp.n_p:
            params = np.tile(self.ss.params, (ocp.N + 1, 1))
        return build_nlp(ocp, x_hat0, params)

    def steady_state_for(self, kind: str) -> SteadyState:
        """Steady-state primal-dual pair of each formulation (duals differ)."""
        if kind == "economic":
            return self.ss
        if kind == "letempc":
            return replace(self.ss, lam=np.zeros_like(self.ss.lam))
        return replace(self.ss, lam=np.zeros_like(self.ss.lam), mu=np.zeros_like(self.ss.mu))

    def guess(self, nlp: OcpNlp, kind: str = "economic"):
        return steady_iterate(nlp, self.steady_state_for(kind), nlp.x_hat0)


# --------------------------------------------------------------------------
# evaporation process

EVAPORATION_PARAMETERS = dict(
    a=0.5616, b=0.3126, c=48.43, d=0.507, e=55.0, f=0.1538, g=90.0, h=0.16,
    M=20.0, C=4.0, UA2=6.84, Cp=0.07, lam=38.5, lam_s=36.6,
    F1=10.0, X1=5.0, F3=50.0, T1=40.0, T200=25.0,
)
EVAPORATION_STEADY_STATE = (25.0, 49.743, 191.713, 215.888)


def _evaporation_flows(x, u, p):
    X2, P2 = x[0], x[1]
    P100, F200 = u[0], u[1]
    T2 = p["a"] * P2 + p["b"] * X2 + p["c"]
    T3 = p["d"] * P2 + p["e"]
    T100 = p["f"] * P100 + p["g"]
    UA1 = p["h"] * (p["F1"] + p["F3"])
    Q100 = UA1 * (T100 - T2)
    F100 = Q100 / p["lam_s"]
    F4 = (Q100 - p["F1"] * p["Cp"] * (T2 - p["T1"])) / p["lam"]
    Q200 = p["UA2"] * (T3 - p["T200"]) / (1.0 + p["UA2"] / (2.0 * p["Cp"] * F200))
    F5 = Q200 / p["lam"]
    F2 = p["F1"] - F4
    return F2, F4, F5, F100


def evaporation_model(params=None, dt: float = 1.0, sub_steps: int = 5):
    """Return ``(dynamics, stage_cost, path_constraints)``; states (X2, P2), controls (P100, F200)."""
    p = dict(EVAPORATION_PARAMETERS if params is None else params)

    def ode(x, u):
        F2, F4, F5, _ = _evaporation_flows(x, u, p)
        return [(p["F1"] * p["X1"] - F2 * x[0]) / p["M"], (F4 - F5) / p["C"]]

    def cost(x, u):
        F2, _, _, F100 = _evaporation_flows(x, u, p)
        return [10.09 * (F2 + p["F3"]) + 600.0 * F100 + 0.6 * u[1]]

    def bounds(x, u):
        return [x[0] - 25.0, x[1] - 40.0, 80.0 - x[1], 400.0 - u[0], 400.0 - u[1]]

    io = [("x", 2), ("u", 2)]
    fc = Function.from_callable("evaporator", ode, io)
    dyn = discretize_rk4(fc, dt, sub_steps, name="evaporator_rk4")
    return dyn, Function.from_callable("evap_cost", cost, io), Function.from_callable("evap_bounds", bounds, io)


def _tracking_cost(ss: SteadyState, qx: float, qu: float, states, n_x: int, n_u: int, n_p: int = 0,
                   reference=None):
    """``qx |x - x_s|^2 + qu |u - u_s|^2`` over ``states``; the steady state may depend on ``p``."""
    def fn(x, u, *p):
        if reference is None:
            xs, us = ss.x, ss.u
        else:
            xs, us = reference(p[0])
        dx = np.array([x[i] - xs[i] for i in states], dtype=object)
        du = u - us
        return [qx * np.sum(dx * dx) + qu * np.sum(du * du)]
    io = [("x", n_x), ("u", n_u)] + ([("p", n_p)] if n_p else [])
    return Function.from_callable("tracking_cost", fn, io)


def _letempc_cost(ss: SteadyState, convex: ConvexHessian, q: np.ndarray, n_x: int, n_u: int, n_p: int = 0,
                  reference=None):
    M = convex.M

    def fn(x, u, *p):
        if reference is None:
            ws = ss.w
        else:
            xs, us = reference(p[0])
            ws = np.concatenate([xs, us])
        d = np.concatenate([x, u]) - ws
        return [0.5 * (d @ (M @ d)) + q @ d]
    io = [("x", n_x), ("u", n_u)] + ([("p", n_p)] if n_p else [])
    return Function.from_callable("letempc_cost", fn, io)


def _letempc_terminal(ss: SteadyState, convex: ConvexHessian, q_f: np.ndarray, n_x: int, n_p: int = 0,
                      reference=None):
    M_f = convex.M_f

    def fn(x, *p):
        xs = ss.x if reference is None else reference(p[0])[0]
        d = x - xs
        return [0.5 * (d @ (M_f @ d)) + q_f @ d]
    io = [("x", n_x)] + ([("p", n_p)] if n_p else [])
    return Function.from_callable("letempc_terminal", fn, io)


def rotated_gradient(ocp: OcpSpec, ss: SteadyState):
    """Gradients of the costs rotated by ``-lam_s' x`` at the steady state.

    The stage part equals ``C' mu_s``, the pull of the active constraints.
    """
    nx = ocp.n_x
    lin = steady_linearization(ocp, ss)
    from ..transcription import _stage_point
    l = ocp.stage_cost
    g = l.jacobian(_stage_point(l, ss.w, ss.params), n_diff=nx + ocp.n_u)[0]
    J = np.hstack([lin.A, lin.B])
    q = g - np.concatenate([ss.lam, np.zeros(ocp.n_u)]) + J.T @ ss.lam
    if ocp.terminal_cost is not None:
        V = ocp.terminal_cost
        q_f = V.jacobian(_stage_point(V, ss.x, ss.params), n_diff=nx)[0] - ss.lam
    else:
        q_f = -ss.lam
    return q, q_f


def _validate(name, ocp, ss, convex, N_check: int = 20):
    from ..convexify import verify_certificate, reduced_hessian_check
    nlp = build_nlp(ocp.with_horizon(N_check), ss.x, np.tile(ss.params, (N_check + 1, 1)) if ocp.n_p else None)
    z = steady_iterate(nlp, ss)
    r = kkt_residual(nlp, z).inf_norm
    if r > 1e-8:
        raise PlantValidationError(f"{name}: steady state is not a KKT point of the OCP (residual {r:.2e})")
    if not verify_certificate(convex.certificate):
        raise PlantValidationError(f"{name}: convexification certificate does not verify")
    return r


def evaporation_plant(N: int = 200, rho1: float = 1e-2, rho2: float = 1e-2, N_sim: int = 60,
                      validate: bool = True, dt: float = 1.0) -> PlantBundle:
    dyn, cost, bounds = evaporation_model(dt=dt)
    ss = solve_sop(cost, dyn, bounds, guess=([30.0, 50.0], [200.0, 200.0]))
    ref = np.array(EVAPORATION_STEADY_STATE)
    if np.max(np.abs(ss.w - ref)) > 1e-3:
        raise PlantValidationError(f"evaporation steady state {ss.w} differs from the reference {ref}")
    xs = ss.x.copy()
    g_f = Function.from_callable("terminal_point", lambda x: [x[0] - xs[0], x[1] - xs[1]], [("x", 2)])
    econ = OcpSpec(N, dyn, cost, bounds, None, g_f, ("eq", "eq"), name="evaporation")
    econ = shift_costs(econ, ss)
    convex = convexify_steady_state(econ, ss, rho1, rho2)
    H, H_f = steady_hessians(econ, ss)
    track = OcpSpec(N, dyn, _tracking_cost(ss, 10.0, 0.1, range(2), 2, 2), bounds, None, g_f, ("eq", "eq"),
                    name="evaporation_tracking")
    q, q_f = rotated_gradient(econ, ss)
    let = OcpSpec(N, dyn, _letempc_cost(ss, convex, q, 2, 2), bounds, _letempc_terminal(ss, convex, q_f, 2),
                  g_f, ("eq", "eq"), name="evaporation_letempc")
    if validate:
        _validate("evaporation", econ, ss, convex)
    meta = {"units": {"x": ["X2 [%]", "P2 [kPa]"], "u": ["P100 [kPa]", "F200 [kg/min]"], "t": "min"},
            "parameters": dict(EVAPORATION_PARAMETERS),
            "source": "standard evaporator parameter set; validated against the reference steady state"}
    return PlantBundle("evaporation", econ, ss, convex, cost, track, let, dt, N_sim, H, H_f, None, meta)


# --------------------------------------------------------------------------
# electric vehicle

EV_PARAMETERS = dict(L=4.8, m=1700.0, r=0.35, g=9.81, Gr=7.94, Cd=0.45, Cr=0.015,
                     T_max=280.0, P_max=80e3, omega_max=10000.0 * 2.0 * np.pi / 60.0, Fb_max=10e3,
                     alpha=0.055, b=(1.0, 1.0, 1.0, 1.0), v_ref=50.0 / 3.6, power_unit=1e3)
EV_OBSTACLE = dict(px_max=80.0, t_end=6.0, off=1e4)
EV_STEP = dict(t_step=8.0)


def ev_power(T, omega):
    """Electrical power ``omega T + P_loss``, i.e. ``omega T / eta``."""
    P_loss = 0.0323 * omega * T + 0.0183 * omega ** 2 + 0.0043 * T ** 2
    return omega * T + P_loss


def ev_efficiency(T, omega):
    P_loss = 0.0323 * omega * T + 0.0183 * omega ** 2 + 0.0043 * T ** 2
    return omega * T / (omega * T + P_loss)


def ev_speed_weight(p=None) -> float:
    """Speed reward that makes the economic steady state cruise at ``v_ref``.

    At steady cruise the torque balances drag, so the power is a function of
    ``v`` alone; the optimal cruise speed solves ``dP/dv = weight``.
    """
    p = dict(EV_PARAMETERS if p is None else p)
    v = symbols(1)[0]
    F_d = p["Cd"] * v * v + p["m"] * p["g"] * p["Cr"]
    T = p["r"] * F_d / p["Gr"]
    omega = p["Gr"] * v / p["r"]
    P = Function("cruise_power", [("v", 1)], [ev_power(T, omega) / p["power_unit"]])
    return float(P.jacobian(np.array([p["v_ref"]]))[0, 0])


def ev_model(params=None, dt: float = 0.1, sub_steps: int = 5):
    """States (p_x, p_y, v, theta, delta), controls (T, F_b, u_delta), stage parameters (p_y^r, p_x max)."""
    p = dict(EV_PARAMETERS if params is None else params)
    alpha_eff = ev_speed_weight(p)
    b0, b1, b2, b3 = p["b"]

    def ode(x, u):
        v, th, de = x[2], x[3], x[4]
        T, Fb, ud = u[0], u[1], u[2]
        F_d = p["Cd"] * v * v + p["m"] * p["g"] * p["Cr"]
        return [v * np.cos(th), v * np.sin(th), (p["Gr"] / p["r"] * T - Fb - F_d) / p["m"],
                v * np.tan(de) / p["L"], ud]

    def cost(x, u, q):
        omega = p["Gr"] * x[2] / p["r"]
        econ = ev_power(u[0], omega) / p["power_unit"] - alpha_eff * x[2]
        dy = x[1] - q[0]
        return [econ + b0 * dy * dy + b1 * x[3] * x[3] + b2 * x[4] * x[4] + b3 * u[2] * u[2]]

    def bounds(x, u, q):
        omega = p["Gr"] * x[2] / p["r"]
        return [u[0], p["T_max"] - u[0], p["P_max"] - omega * u[0], omega, p["omega_max"] - omega,
                u[1], p["Fb_max"] - u[1], q[1] - x[0]]

    fc = Function.from_callable("vehicle", ode, [("x", 5), ("u", 3)])
    dyn = discretize_rk4(fc, dt, sub_steps, name="vehicle_rk4")
    io = [("x", 5), ("u", 3), ("p", 2)]
    # interval-mean power: point evaluation at the sample would reward torque chattering
    ell = integrate_stage_cost(fc, Function.from_callable("ev_power_cost", cost, io), dt, sub_steps, "ev_cost")
    return dyn, ell, Function.from_callable("ev_bounds", bounds, io), alpha_eff


def ev_schedule(N: int, dt: float, delta_py: float, mode: str = "preview", t_step: float | None = None,
                obstacle: dict | None = None):
    """Per-sample stage parameters ``(p_y^r, p_x max)`` over the horizon."""
    t_step = EV_STEP["t_step"] if t_step is None else t_step
    ob = dict(EV_OBSTACLE if obstacle is None else obstacle)
    if mode not in ("preview", "constant"):
        raise ValueError("mode must be 'preview' or 'constant'")

    def at(k: int) -> np.ndarray:
        t = (k + np.arange(N + 1)) * dt
        t_ref = t if mode == "preview" else np.full(N + 1, k * dt)
        py = np.where(t_ref >= t_step - 1e-9, delta_py, 0.0)
        px = np.where(t <= ob["t_end"] + 1e-9, ob["px_max"], ob["off"])
        return np.column_stack([py, px])

    def meter_params(k: int) -> np.ndarray:
        t = k * dt
        return np.array([delta_py if t >= t_step - 1e-9 else 0.0, ob["off"]])
    return at, meter_params


def ev_plant(N: int = 100, rho1: float = 1e-2, rho2: float = 1e-2, N_sim: int = 160,
             validate: bool = True, dt: float = 0.1) -> PlantBundle:
    dyn, cost, bounds, alpha_eff = ev_model(dt=dt)
    p = EV_PARAMETERS
    v_r = p["v_ref"]
    F_d = p["Cd"] * v_r ** 2 + p["m"] * p["g"] * p["Cr"]
    T_s = p["r"] * F_d / p["Gr"]
    p_s = np.array([0.0, EV_OBSTACLE["off"]])
    ss = solve_sop(cost, dyn, bounds, guess=([0.0, 0.0, v_r, 0.0, 0.0], [T_s, 0.0, 0.0]), params=p_s,
                   cyclic_states=(0,))
    if abs(ss.x[2] - v_r) > 1e-2 * v_r:
        raise PlantValidationError(f"vehicle steady speed {ss.x[2]:.4f} differs from {v_r:.4f}")

    def reference(q):
        xs = ss.x.astype(object) if isinstance(q[0], Expr) else ss.x.copy()
        xs[1] = xs[1] + q[0]
        return xs, ss.u.copy()

    # stage-only convexification, LQR on the convexified stage, then the terminal-aware problem
    econ0 = shift_costs(OcpSpec(N, dyn, cost, bounds, n_p=2, cyclic_states=(0,), name="vehicle"), ss)
    stage_only = convexify_steady_state(econ0, ss, rho1, rho2, terminal=False)
    keep = stage_only.states
    nk = keep.size
    Mk = stage_only.M[np.ix_(np.concatenate([keep, 5 + np.arange(3)]), np.concatenate([keep, 5 + np.arange(3)]))]
    lin = steady_linearization(econ0, ss)
    P_f = lqr_terminal(lin.A[np.ix_(keep, keep)], lin.B[keep], Mk[:nk, :nk], Mk[nk:, nk:], Mk[:nk, nk:])
    cert = stage_only.certificate
    H_f = np.zeros((5, 5))
    H_f[np.ix_(keep, keep)] = P_f + cert.dP / cert.alpha
    lam_s = ss.lam.copy()

    def terminal(x, q):
        xs = reference(q)[0]
        d = np.array([x[i] - xs[i] for i in range(5)], dtype=object)
        d[0] = 0.0
        return [lam_s @ d + 0.5 * (d @ (H_f @ d))]
    V_f = Function.from_callable("ev_terminal", terminal, [("x", 5), ("p", 2)])
    econ = replace(econ0, terminal_cost=V_f)
    convex = convexify_steady_state(econ, ss, rho1, rho2)
    H, H_fs = steady_hessians(econ, ss)
    track = OcpSpec(N, dyn, _tracking_cost(ss, 10.0, 0.1, range(1, 5), 5, 3, 2, reference), bounds,
                    _letempc_terminal(ss, convex, np.zeros(5), 5, 2, reference), n_p=2, cyclic_states=(0,),
                    name="vehicle_tracking")
    q, q_f = rotated_gradient(econ, ss)
    let = OcpSpec(N, dyn, _letempc_cost(ss, convex, q, 5, 3, 2, reference), bounds,
                  _letempc_terminal(ss, convex, q_f, 5, 2, reference), n_p=2, cyclic_states=(0,),
                  name="vehicle_letempc")
    if validate:
        _validate("vehicle", econ, ss, convex)
    meta = {"units": {"x": ["p_x [m]", "p_y [m]", "v [m/s]", "theta [rad]", "delta [rad]"],
                      "u": ["T [Nm]", "F_b [N]", "u_delta [rad/s]"], "t": "s"},
            "parameters": {k: (list(v) if isinstance(v, tuple) else v) for k, v in EV_PARAMETERS.items()},
            "speed_weight": alpha_eff, "terminal_lqr": P_f.tolist()}
    return PlantBundle("vehicle", econ, ss, convex, cost, track, let, dt, N_sim, H, H_fs, reference, meta)


# --------------------------------------------------------------------------
# artificial economic problem obtained by rotating a tracking problem


@dataclass
class RotationPair:
    """Economic problem ``original`` and its rotation ``rotated`` by ``storage``.

    ``rotated`` carries the tracking cost, so its steady-state multipliers
    vanish while those of ``original`` equal ``-grad Lambda(x_s)``.
    """

    original: OcpSpec
    rotated: OcpSpec
    storage: StorageFunction
    ss: SteadyState
    lam_s: np.ndarray

    def nlps(self, x_hat0):
        return build_nlp(self.original, x_hat0), build_nlp(self.rotated, x_hat0)

    def primal_guess(self, nlp: OcpNlp):
        z = steady_iterate(nlp, replace(self.ss, lam=np.zeros_like(self.ss.lam), mu=np.zeros_like(self.ss.mu)))
        z.nu[:] = 0.0
        return z

    def dual_guesses(self, nlp_original: OcpNlp, nlp_rotated: OcpNlp):
        """Initial iterates with ``mu = 0``, ``nu = 0``, ``lam = lam_s`` and ``lam_bar = 0``."""
        za, zb = self.primal_guess(nlp_original), self.primal_guess(nlp_rotated)
        za.lam[:] = self.lam_s
        return za, zb

    def convexify(self, rho1: float = 1e-2, rho2: float = 1e-2) -> ConvexHessian:
        """Gauss-Newton-like blocks of ``original`` at its steady state (multipliers ``lam_s``, ``mu = 0``)."""
        ss = replace(self.ss, lam=self.lam_s.copy(), mu=np.zeros_like(self.ss.mu))
        return convexify_steady_state(self.original, ss, rho1, rho2)


def evaporation_rotation_pair(plant: PlantBundle | None = None, storage_weight: float = 100.0,
                              qx: float = 10.0, qu: float = 0.1) -> RotationPair:
    """Tracking cost ``qx |x - x_s|^2 + qu |u - u_s|^2`` and ``Lambda(x) = storage_weight x'x``."""
    plant = evaporation_plant() if plant is None else plant
    ss = plant.ss
    dyn, _, bounds = evaporation_model()
    g_f = plant.ocp.terminal_constraints
    track = OcpSpec(plant.ocp.N, dyn, _tracking_cost(ss, qx, qu, range(2), 2, 2), bounds, None, g_f,
                    ("eq", "eq"), name="evaporation_tracking")
    lam = Function.from_callable("storage", lambda x: [storage_weight * (x @ x)], [("x", 2)])
    storage = StorageFunction(lam, ss.x)
    neg = StorageFunction(Function.from_callable("neg_storage", lambda x: [-storage_weight * (x @ x)],
                                                 [("x", 2)]), ss.x)
    original = replace(rotate(track, neg), name="evaporation_artificial")
    rotated = replace(rotate(original, storage), name="evaporation_artificial_rotated")
    return RotationPair(original, rotated, storage, ss, -storage.gradient(ss.x))
