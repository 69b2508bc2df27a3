"""Benchmark plants, controller registry and experiment runner."""
from .controllers import BASELINE, CONTROLLER_NAMES, REGISTRY, ControllerSpec, UnknownControllerError, build_controller
from .experiments import ExperimentConfig, ExperimentError, PRESETS, run_experiment
from .lqr import lqr_gain, lqr_terminal
from .plants import PlantBundle, ev_plant, evaporation_plant, evaporation_rotation_pair

__all__ = ["PlantBundle", "evaporation_plant", "ev_plant", "evaporation_rotation_pair", "lqr_terminal", "lqr_gain",
           "ControllerSpec", "REGISTRY", "CONTROLLER_NAMES", "BASELINE", "UnknownControllerError",
           "build_controller", "ExperimentConfig", "ExperimentError", "PRESETS", "run_experiment"]
