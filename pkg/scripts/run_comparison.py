"""Paired with/without-planning comparison over the shipped task configs.

    python scripts/run_comparison.py --trials 8 --out runs/comparison

Prints, per task, how often planning lowered the energy flow and the ratio of
mean tracking errors.
"""

import argparse
import time
from pathlib import Path

import numpy as np

from endonav.nav_harness import emit_plots, load_config, run_comparison

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trials", type=int, default=8)
    ap.add_argument("--out", default="runs/comparison")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--plots", action="store_true", help="also write SVG panels per trial")
    ap.add_argument("configs", nargs="*", default=sorted(CONFIGS.glob("*.ini")))
    args = ap.parse_args()

    for path in map(Path, args.configs):
        t0 = time.perf_counter()
        out = Path(args.out) / path.stem
        comp = run_comparison(load_config(path), args.trials, out, jobs=args.jobs)
        flow = comp.paired(3)
        err = comp.paired(2)
        wins = int(np.sum(flow[:, 0] < flow[:, 1]))
        failed = {m: sum(not t.success for t in ts) for m, ts in comp.trials.items()}
        ratio = err[:, 0].mean() / err[:, 1].mean() if len(err) else float("nan")
        print(f"{path.stem}: energy flow lower with planning in {wins}/{len(flow)} pairs, "
              f"error ratio {ratio:.3f}, failures {failed}, {time.perf_counter() - t0:.0f} s")
        if args.plots:
            emit_plots(out)


if __name__ == "__main__":
    main()
