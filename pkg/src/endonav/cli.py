"""Command line entry point: ``run``, ``compare`` and ``plot``."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .geometry_core import ConfigError
from .nav_harness import (MODES, PlotError, emit_plots, load_config, run_comparison, run_trial,
                      write_metrics)


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="endonav",
                                 description="Simulated endoscope navigation trials.")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run trials of one controller mode")
    run.add_argument("--config", required=True)
    run.add_argument("--trials", type=int, default=None)
    run.add_argument("--mode", choices=MODES, default=None)
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--out", default="runs")

    cmp_ = sub.add_parser("compare", help="paired with/without-planning comparison")
    cmp_.add_argument("--config", required=True)
    cmp_.add_argument("--out", required=True)
    cmp_.add_argument("--trials", type=int, default=None)
    cmp_.add_argument("--jobs", type=int, default=1, help="worker processes")

    plot = sub.add_parser("plot", help="SVG panels for every trial under a run directory")
    plot.add_argument("--run", required=True)
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "plot":
            files = emit_plots(args.run)
            print(f"wrote {len(files)} plots under {args.run}")
            return 0
        cfg = load_config(args.config)
        if getattr(args, "seed", None) is not None:
            cfg = replace(cfg, task=replace(cfg.task, seed=args.seed))
        if args.command == "run":
            mode = args.mode or cfg.task.mode
            n = args.trials if args.trials is not None else cfg.task.trials
            out = Path(args.out)
            records = []
            for i in range(n):
                m = run_trial(cfg, i, out / f"{mode}_{i:02d}", mode=mode)
                records.append((mode, i, m))
                print(f"{mode} trial {i}: {'ok' if m.success else 'FAILED ' + m.failure} "
                      f"T_in={m.T_in:.2f}s L_et={m.L_et:.1f}mm e={m.mean_e_px:.3f}px "
                      f"flow={m.energy_flow:.2f}")
            write_metrics(out / "metrics.csv", records)
            return 0 if all(m.success for _, _, m in records) else 1
        comp = run_comparison(cfg, args.trials, args.out, jobs=args.jobs)
        print((Path(args.out) / "comparison.csv").read_text(), end="")
        return 0 if all(m.success for ms in comp.trials.values() for m in ms) else 1
    except (ConfigError, PlotError, OSError) as exc:
        print(f"endonav: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
