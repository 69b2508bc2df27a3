"""Command line interface: ``gnempc {sop,convexify,solve,rti,sweep}``.

Exit status is 0 only when every internal validation passes, 1 when a
validation fails and 2 for usage or configuration errors.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .apps.controllers import CONTROLLER_NAMES, UnknownControllerError
from .apps.experiments import (CONVERGENCE_HESSIANS, PLANTS, PRESETS, ExperimentConfig, ExperimentError,
                               closed_loop, convergence_study, load_plant, run_experiment, write_convergence_csv,
                               write_json)
from .apps.plants import PlantValidationError
from .convexify import ConvexificationError, reduced_hessian_check, verify_certificate
from .rti import performance_loss

REDUCED_HESSIAN_TOL = 1e-8


def _vector(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.split(",")])


def _emit(data: dict) -> None:
    print(json.dumps(data, indent=2, sort_keys=True))


def cmd_sop(args) -> int:
    plant = load_plant(args.plant)
    ss = plant.ss
    _emit({"plant": plant.name, "x_s": ss.x.tolist(), "u_s": ss.u.tolist(), "lam_s": ss.lam.tolist(),
           "mu_s": ss.mu.tolist(), "active": ss.active_set().tolist(), "ell_s": float(plant.ell_s)})
    return 0


def cmd_convexify(args) -> int:
    plant = load_plant(args.plant)
    cert = plant.convex.certificate
    nlp = plant.nlp(N=args.N)
    z = plant.guess(nlp)
    ratio = reduced_hessian_check(nlp, plant.convex.blocks(args.N), nlp.lagrangian_hessian(z), plant.ss, z)
    ok_cert = verify_certificate(cert)
    ok_thm = ratio <= REDUCED_HESSIAN_TOL
    if args.out:
        plant.convex.to_json(args.out)
    _emit({"plant": plant.name, "alpha": cert.alpha, "beta": cert.beta, "margins": cert.margins(),
           "lambda_min_M": float(np.linalg.eigvalsh(plant.convex.M)[0]),
           "lambda_min_M_f": float(np.linalg.eigvalsh(plant.convex.M_f)[0]) if plant.convex.M_f.size else None,
           "reduced_hessian_ratio": ratio, "certificate_ok": ok_cert, "reduced_hessian_ok": ok_thm})
    return 0 if ok_cert and ok_thm else 1


def cmd_solve(args) -> int:
    plant = load_plant(args.plant)
    x0 = plant.ss.x if args.x0 is None else _vector(args.x0)
    if x0.size != plant.ss.x.size:
        raise ExperimentError(f"--x0 needs {plant.ss.x.size} values")
    traces = convergence_study(plant, x0, tuple(args.hessian), args.tol, args.max_iter)
    if args.csv:
        write_convergence_csv(args.csv, traces)
    _emit({k: {"status": tr.status, "iterations": tr.n_iter, "kkt": [float(r) for r in tr.kkt]}
           for k, tr in traces.items()})
    return 0


def cmd_rti(args) -> int:
    plant = load_plant(args.plant, N_sim=args.N_sim)
    trace = closed_loop(plant, args.controller, args.value, args.reference_mode, args.tol, args.max_iter)
    if args.csv:
        trace.to_csv(args.csv)
    out = {"controller": args.controller, "J_cl": trace.J_cl, "diverged": trace.diverged, "samples": trace.N_sim}
    if args.compare:
        base = closed_loop(plant, "EMPC-converged", args.value, args.reference_mode, args.tol, args.max_iter)
        out["delta_J_percent"] = performance_loss(trace, base, plant.ell_s) if not trace.diverged else None
    _emit(out)
    return 0


def load_config(path: str) -> dict:
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    return dict(data.get("experiment", data))


def cmd_sweep(args) -> int:
    data = load_config(args.config) if args.config else {}
    if args.preset:
        data["preset"] = args.preset
    if "preset" not in data and "name" not in data:
        raise ExperimentError("sweep needs --preset or --config")
    for key in ("output_dir", "workers", "N_sim"):
        val = getattr(args, key)
        if val is not None:
            data[key] = val
    data["seed"] = args.seed
    cfg = ExperimentConfig.from_mapping(data)
    summary = run_experiment(cfg)
    print(os.path.join(cfg.output_dir, f"{cfg.name}_summary.json"))
    if "series" in summary:
        return 0
    bad = [(p[cfg.sweep_variable], c) for p in summary["points"] for c, r in p["runs"].items()
           if c == "EMPC-converged" and r["diverged"]]
    return 1 if bad else 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gnempc", description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0, help="reserved; all runs are deterministic")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sop", help="steady-state optimization problem")
    p.add_argument("--plant", choices=sorted(PLANTS), default="evaporation")
    p.set_defaults(func=cmd_sop)

    p = sub.add_parser("convexify", help="Hessian convexification certificate and reduced-Hessian check")
    p.add_argument("--plant", choices=sorted(PLANTS), default="evaporation")
    p.add_argument("--N", type=int, default=20, help="horizon of the reduced-Hessian check")
    p.add_argument("--out", help="write the ConvexHessian JSON here")
    p.set_defaults(func=cmd_convexify)

    p = sub.add_parser("solve", help="SQP on one OCP instance")
    p.add_argument("--plant", choices=sorted(PLANTS), default="evaporation")
    p.add_argument("--x0", help="comma-separated initial state (default: steady state)")
    p.add_argument("--hessian", action="append", choices=sorted(CONVERGENCE_HESSIANS))
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--max-iter", dest="max_iter", type=int, default=100)
    p.add_argument("--csv", help="convergence CSV path")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("rti", help="one closed-loop simulation")
    p.add_argument("--plant", choices=sorted(PLANTS), default="evaporation")
    p.add_argument("--controller", choices=CONTROLLER_NAMES, default="GN-RTI")
    p.add_argument("--value", type=float, default=0.0, help="delta_P2 (evaporation) or delta_py (vehicle)")
    p.add_argument("--N-sim", dest="N_sim", type=int)
    p.add_argument("--reference-mode", dest="reference_mode", choices=("preview", "constant"), default="preview")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iter", dest="max_iter", type=int, default=100)
    p.add_argument("--compare", action="store_true", help="also run the converged baseline and report the loss")
    p.add_argument("--csv", help="trace CSV path")
    p.set_defaults(func=cmd_rti)

    p = sub.add_parser("sweep", help="run a preset or a TOML experiment configuration")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--config", help="TOML file with an [experiment] table or top-level keys")
    p.add_argument("--out", dest="output_dir")
    p.add_argument("--workers", type=int)
    p.add_argument("--N-sim", dest="N_sim", type=int)
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "hessian", "unset") is None:
        args.hessian = list(CONVERGENCE_HESSIANS)
    try:
        return args.func(args)
    except (ExperimentError, UnknownControllerError, OSError, tomllib.TOMLDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (PlantValidationError, ConvexificationError) as exc:
        print(f"validation failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
