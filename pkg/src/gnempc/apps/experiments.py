"""Experiment runner: SQP convergence studies and closed-loop sweeps written as CSV/JSON."""
from __future__ import annotations

import csv
import json
import math
import os
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from functools import lru_cache

import numpy as np

from ..rti import ClosedLoopTrace, performance_loss, simulate_closed_loop
from ..sqp import HessianStrategy, SqpTrace, sqp_solve
from .controllers import BASELINE, CONTROLLER_NAMES, UnknownControllerError, build_controller, controller_spec
from .plants import PlantBundle, ev_plant, ev_schedule, evaporation_plant, evaporation_rotation_pair

PLANTS = {"evaporation": evaporation_plant, "vehicle": ev_plant}
SWEEP_VARIABLES = {"evaporation": "delta_P2", "vehicle": "delta_py"}
KINDS = ("convergence", "rotation", "sweep")
CONVERGENCE_HESSIANS = {"Exact": "exact_regularized", "GN": "gauss_newton_empc", "Identity": "identity"}


class ExperimentError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    """One study. ``kind`` is ``convergence`` (SQP on one OCP instance),
    ``rotation`` (original versus rotated problem) or ``sweep`` (closed loops
    over ``grid`` values of ``sweep_variable`` for every controller)."""

    name: str
    kind: str = "sweep"
    plant: str = "evaporation"
    controllers: tuple = ()
    hessians: tuple = ("Exact", "GN", "Identity")
    sweep_variable: str = ""
    grid: tuple = ()
    N: int | None = None
    t_s: float | None = None
    N_sim: int | None = None
    x_hat0: tuple | None = None
    tol: float = 1e-8
    max_iter: int = 100
    reference_mode: str = "preview"
    output_dir: str = "results"
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ExperimentError(f"unknown experiment kind {self.kind!r}; choose from {', '.join(KINDS)}")
        if self.plant not in PLANTS:
            raise ExperimentError(f"unknown plant {self.plant!r}; choose from {', '.join(PLANTS)}")
        for name in self.controllers:
            controller_spec(name)
        for h in self.hessians:
            if h not in CONVERGENCE_HESSIANS:
                raise ExperimentError(f"unknown Hessian {h!r}; choose from {', '.join(CONVERGENCE_HESSIANS)}")
        if self.kind == "sweep":
            if not self.controllers or not self.grid:
                raise ExperimentError("a sweep needs controllers and a grid")
            if self.sweep_variable != SWEEP_VARIABLES[self.plant]:
                raise ExperimentError(f"plant {self.plant} sweeps {SWEEP_VARIABLES[self.plant]!r}, "
                                      f"not {self.sweep_variable!r}")
        if self.kind == "rotation" and self.plant != "evaporation":
            raise ExperimentError("the rotation study is defined on the evaporation plant")
        if self.workers < 1:
            raise ExperimentError("workers must be positive")

    @classmethod
    def from_mapping(cls, data: dict) -> "ExperimentConfig":
        """Build from a flat mapping; a ``preset`` key supplies defaults."""
        data = dict(data)
        base = preset(data.pop("preset")) if "preset" in data else None
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise ExperimentError(f"unknown configuration keys: {', '.join(sorted(extra))}")
        for key in ("controllers", "hessians", "grid", "x_hat0"):
            if key in data and data[key] is not None:
                data[key] = tuple(data[key])
        if base is None:
            if "name" not in data:
                raise ExperimentError("configuration needs a name or a preset")
            return cls(**data)
        return replace(base, **data)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


PRESETS = {
    "fig1": ExperimentConfig("fig1", "convergence", "evaporation", x_hat0=(35.0, 49.743), tol=1e-9,
                             max_iter=100),
    "fig2": ExperimentConfig("fig2", "rotation", "evaporation", x_hat0=(35.0, 49.743), tol=1e-10, max_iter=100),
    "fig3": ExperimentConfig("fig3", "sweep", "evaporation", CONTROLLER_NAMES, sweep_variable="delta_P2",
                             grid=tuple(float(v) for v in np.linspace(0.0, 10.0, 11)), N_sim=60),
    "fig4": ExperimentConfig("fig4", "sweep", "vehicle",
                             ("EMPC-converged", "EH-RTI", "GN-RTI", "SD-RTI", "LETEMPC-converged",
                              "GN-RTI-LETEMPC"),
                             sweep_variable="delta_py", grid=tuple(float(v) for v in np.linspace(0.0, 3.0, 7)),
                             N_sim=160),
}


def preset(name: str) -> ExperimentConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ExperimentError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None


@lru_cache(maxsize=8)
def load_plant(name: str, N: int | None = None, t_s: float | None = None, N_sim: int | None = None) -> PlantBundle:
    """Plant bundle, built once per process for each configuration."""
    kw = {}
    if N is not None:
        kw["N"] = int(N)
    if t_s is not None:
        kw["dt"] = float(t_s)
    if N_sim is not None:
        kw["N_sim"] = int(N_sim)
    return PLANTS[name](**kw)


def _plant(cfg: ExperimentConfig) -> PlantBundle:
    return load_plant(cfg.plant, cfg.N, cfg.t_s, cfg.N_sim)


# --------------------------------------------------------------------------
# SQP convergence


def convergence_study(plant: PlantBundle, x_hat0, hessians=("Exact", "GN", "Identity"), tol: float = 1e-10,
                      max_iter: int = 100) -> dict[str, SqpTrace]:
    """Full-step SQP from the steady-state primal-dual point for each Hessian."""
    out = {}
    for label in hessians:
        key = CONVERGENCE_HESSIANS[label]
        strategy = {"exact_regularized": HessianStrategy.exact_regularized(),
                    "gauss_newton_empc": HessianStrategy.gauss_newton_empc(plant.convex),
                    "identity": HessianStrategy.identity()}[key]
        nlp = plant.nlp(np.asarray(x_hat0, float))
        _, tr = sqp_solve(nlp, strategy, plant.guess(nlp), tol=tol, max_iter=max_iter)
        out[label] = tr
    return out


def rotation_study(plant: PlantBundle, x_hat0, tol: float = 1e-10, max_iter: int = 100) -> dict[str, SqpTrace]:
    """Exact-Hessian SQP on the artificial economic problem and on its rotation."""
    pair = evaporation_rotation_pair(plant)
    na, nb = pair.nlps(np.asarray(x_hat0, float))
    za, zb = pair.dual_guesses(na, nb)
    strategy = HessianStrategy.exact()
    _, ta = sqp_solve(na, strategy, za, tol=tol, max_iter=max_iter)
    _, tb = sqp_solve(nb, strategy, zb, tol=tol, max_iter=max_iter)
    return {"original": ta, "rotated": tb}


def _contraction(kkt) -> float | None:
    r = np.asarray(kkt, float)
    r = r[r > 0]
    if r.size < 3:
        return None
    return float(np.max(r[-3:][1:] / r[-3:][:-1]))


def write_convergence_csv(path, traces: dict[str, SqpTrace]) -> None:
    """Long format; ``primal_gap`` is the distance to the first series' iterate."""
    names = list(traces)
    ref = traces[names[0]].iterates
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["series", "iteration", "kkt_inf_norm", "step_norm", "primal_gap"])
        for name in names:
            tr = traces[name]
            for i, r in enumerate(tr.kkt):
                s = tr.step_norm[i] if i < len(tr.step_norm) else 0.0
                gap = np.linalg.norm(tr.iterates[i].w - ref[i].w) if i < len(ref) and i < len(tr.iterates) else math.nan
                wr.writerow([name, i, repr(float(r)), repr(float(s)), repr(float(gap))])


# --------------------------------------------------------------------------
# closed-loop sweeps


def closed_loop(plant: PlantBundle, controller: str, value: float, reference_mode: str = "preview",
                tol: float = 1e-8, max_iter: int = 100) -> ClosedLoopTrace:
    """One closed loop at sweep value ``value`` (``delta_P2`` or ``delta_py``)."""
    if plant.name == "evaporation":
        x0 = plant.ss.x + np.array([0.0, value])
        ctrl = build_controller(plant, controller, x0, tol=tol, max_iter=max_iter)
        return simulate_closed_loop(plant.ocp.dynamics, ctrl, x0, plant.N_sim, plant.meter)
    params, meter_params = ev_schedule(plant.ocp.N, plant.dt, value, reference_mode)
    x0 = plant.ss.x.copy()
    ctrl = build_controller(plant, controller, x0, params=params, reference=plant.reference, tol=tol,
                            max_iter=max_iter)
    return simulate_closed_loop(plant.ocp.dynamics, ctrl, x0, plant.N_sim, plant.meter, meter_params)


def _run_point(args):
    cfg, controller, value = args
    return closed_loop(_plant(cfg), controller, value, cfg.reference_mode, cfg.tol, cfg.max_iter)


def _final_deviation(plant: PlantBundle, trace: ClosedLoopTrace, value: float) -> float:
    if plant.reference is None:
        xs = plant.ss.x
    else:
        xs = plant.reference(np.array([value, 0.0]))[0]
    keep = [i for i in range(xs.size) if i not in plant.ss.cyclic_states]
    return float(np.linalg.norm(trace.x[-1, keep] - xs[keep]))


def _finite(v):
    return None if v is None or not np.isfinite(v) else float(v)


def sweep(cfg: ExperimentConfig, out_dir: str | None = None) -> dict:
    """Run every (grid value, controller) pair; the baseline is added when missing."""
    plant = _plant(cfg)
    controllers = list(cfg.controllers)
    if BASELINE not in controllers:
        controllers.insert(0, BASELINE)
    tasks = [(cfg, c, float(v)) for v in cfg.grid for c in controllers]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            traces = list(pool.map(_run_point, tasks))
    else:
        traces = [_run_point(t) for t in tasks]
    results = {(t[2], t[1]): tr for t, tr in zip(tasks, traces)}
    points = []
    for i, v in enumerate(cfg.grid):
        v = float(v)
        base = results[(v, BASELINE)]
        runs = {}
        for c in controllers:
            tr = results[(v, c)]
            fname = f"{cfg.name}_{cfg.sweep_variable}_{i:02d}_{c}.csv"
            if out_dir is not None:
                tr.to_csv(os.path.join(out_dir, fname))
            comparable = not tr.diverged and not base.diverged and tr.N_sim == base.N_sim
            loss = performance_loss(tr, base, plant.ell_s) if comparable else None
            runs[c] = {"csv": fname, "J_cl": _finite(tr.J_cl), "delta_J_percent": _finite(loss),
                       "diverged": bool(tr.diverged), "samples": int(tr.N_sim),
                       "final_deviation": _finite(_final_deviation(plant, tr, v)),
                       "qp_status": dict(sorted(Counter(tr.qp_status).items()))}
        points.append({cfg.sweep_variable: v, "runs": runs})
    delta_J = {c: [[p[cfg.sweep_variable], p["runs"][c]["delta_J_percent"]] for p in points] for c in controllers}
    return {"plant": plant.name, "ell_s": float(plant.ell_s), "baseline": BASELINE, "sweep_variable":
            cfg.sweep_variable, "delta_J": delta_J, "points": points}


# --------------------------------------------------------------------------
# entry point


def _check_writable(out_dir: str) -> None:
    try:
        os.makedirs(out_dir, exist_ok=True)
        probe = os.path.join(out_dir, ".write_probe")
        with open(probe, "w") as fh:
            fh.write("")
        os.remove(probe)
    except OSError as exc:
        raise ExperimentError(f"output directory {out_dir!r} is not writable: {exc}") from exc


def write_json(path, data) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps(data, indent=2, sort_keys=True, allow_nan=False))
        fh.write("\n")


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Run ``cfg`` and write its files under ``cfg.output_dir``; returns the summary."""
    out_dir = cfg.output_dir
    _check_writable(out_dir)
    # where and how parallel a run executes does not change its results, so the summary omits both
    summary = {"config": {k: v for k, v in cfg.to_dict().items() if k not in ("output_dir", "workers")}}
    if cfg.kind in ("convergence", "rotation"):
        plant = _plant(cfg)
        x_hat0 = cfg.x_hat0 if cfg.x_hat0 is not None else tuple(plant.ss.x)
        if cfg.kind == "convergence":
            traces = convergence_study(plant, x_hat0, cfg.hessians, cfg.tol, cfg.max_iter)
        else:
            traces = rotation_study(plant, x_hat0, cfg.tol, cfg.max_iter)
        fname = f"{cfg.name}_convergence.csv"
        write_convergence_csv(os.path.join(out_dir, fname), traces)
        summary["convergence_csv"] = fname
        summary["series"] = {k: {"status": tr.status, "iterations": tr.n_iter, "final_kkt": _finite(tr.kkt[-1]),
                                 "tail_contraction": _contraction(tr.kkt)} for k, tr in traces.items()}
    else:
        summary.update(sweep(cfg, out_dir))
    write_json(os.path.join(out_dir, f"{cfg.name}_summary.json"), summary)
    return summary


__all__ = ["ExperimentConfig", "ExperimentError", "PRESETS", "preset", "run_experiment", "convergence_study",
           "rotation_study", "closed_loop", "sweep", "load_plant", "UnknownControllerError"]
