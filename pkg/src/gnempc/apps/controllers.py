"""Registry of the closed-loop controllers compared on both plants."""
from __future__ import annotations

from dataclasses import dataclass

from ..rti import RtiController, make_controller
from ..sqp import HessianStrategy
from .plants import PlantBundle


@dataclass(frozen=True)
class ControllerSpec:
    """``formulation`` is economic, letempc or tracking; ``hessian`` names a strategy."""

    name: str
    formulation: str
    hessian: str
    converged: bool
    tolerate_nonconvex: bool = False


REGISTRY = {s.name: s for s in (
    ControllerSpec("EMPC-converged", "economic", "exact_regularized", True),
    ControllerSpec("EH-RTI", "economic", "exact_regularized", False),
    ControllerSpec("GN-RTI", "economic", "gauss_newton_empc", False),
    ControllerSpec("IH-RTI", "economic", "steady_exact", False, tolerate_nonconvex=True),
    ControllerSpec("SD-RTI", "economic", "identity", False),
    ControllerSpec("LETEMPC-converged", "letempc", "exact_regularized", True),
    ControllerSpec("GN-RTI-LETEMPC", "letempc", "gauss_newton_empc", False),
    ControllerSpec("TMPC-converged", "tracking", "exact_regularized", True),
    ControllerSpec("GN-RTI-TMPC", "tracking", "gauss_newton", False),
)}

CONTROLLER_NAMES = tuple(REGISTRY)
BASELINE = "EMPC-converged"


class UnknownControllerError(KeyError):
    pass


def controller_spec(name: str) -> ControllerSpec:
    try:
        return REGISTRY[name]
    except KeyError:
        raise UnknownControllerError(f"unknown controller {name!r}; choose from {', '.join(CONTROLLER_NAMES)}") from None


def hessian_strategy(plant: PlantBundle, key: str) -> HessianStrategy:
    """Strategy named ``key`` for ``plant``.

    ``steady_exact`` freezes the exact Lagrangian Hessian at the steady
    state, which is indefinite for economic costs.
    """
    if key == "exact":
        return HessianStrategy.exact()
    if key == "exact_regularized":
        return HessianStrategy.exact_regularized()
    if key == "gauss_newton_empc":
        return HessianStrategy.gauss_newton_empc(plant.convex)
    if key == "gauss_newton":
        return HessianStrategy.gauss_newton()
    if key == "identity":
        return HessianStrategy.identity()
    if key == "steady_exact":
        return HessianStrategy.fixed(plant.H, plant.H_f, label="SteadyExact")
    raise ValueError(f"unknown Hessian strategy {key!r}")


def build_controller(plant: PlantBundle, name: str, x_hat0=None, params=None, reference=None,
                     tol: float = 1e-8, max_iter: int = 100) -> RtiController:
    """Controller ``name`` initialized at the steady-state trajectory of its formulation."""
    spec = controller_spec(name)
    p0 = None if params is None else params(0)
    nlp = plant.nlp(plant.ss.x if x_hat0 is None else x_hat0, spec.formulation, params=p0)
    guess = plant.guess(nlp, spec.formulation)
    return make_controller(nlp, hessian_strategy(plant, spec.hessian), plant.steady_state_for(spec.formulation),
                           guess, converged=spec.converged, params=params, reference=reference,
                           tolerate_nonconvex=spec.tolerate_nonconvex, name=name, tol=tol, max_iter=max_iter)

