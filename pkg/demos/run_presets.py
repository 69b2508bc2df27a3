"""Run the built-in experiment presets and print a compact summary of each.

Usage: python demos/run_presets.py [fig1 fig2 fig3 fig4] [--out DIR] [--N-sim N]
"""
import argparse
import json
from dataclasses import replace

from gnempc.apps.experiments import PRESETS, preset, run_experiment


def summarize(summary: dict) -> None:
    if "points" in summary:
        for p in summary["points"]:
            var = next(k for k in p if k != "runs")
            cells = [f"{c}={r['delta_J_percent']:.3g}%" if not r["diverged"] else f"{c}=diverged"
                     for c, r in p["runs"].items() if r.get("delta_J_percent") is not None or r["diverged"]]
            print(f"  {var}={p[var]:g}: " + ", ".join(cells))
    else:
        print(json.dumps({k: v for k, v in summary.items() if k != "config"}, indent=1, default=str)[:2000])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("names", nargs="*", default=sorted(PRESETS))
    ap.add_argument("--out", default="demo_output")
    ap.add_argument("--N-sim", dest="N_sim", type=int)
    args = ap.parse_args()
    for name in args.names:
        cfg = replace(preset(name), output_dir=args.out)
        if args.N_sim is not None:
            cfg = replace(cfg, N_sim=args.N_sim)
        print(name)
        summarize(run_experiment(cfg))


if __name__ == "__main__":
    main()
