"""Online Jacobian learning under open-loop excitation in a straight tube.

    python scripts/learning_convergence.py --ticks 2000 --svg learning.svg

Reports the tick where each flow prediction error first settles below 10% of
its initial level (moving average over 50 ticks).
"""

import argparse
from dataclasses import replace

import numpy as np

from endonav.nav_harness import ExcitationConfig, converged_tick, excitation_learning


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ticks", type=int, default=2000)
    ap.add_argument("--sigma", type=float, default=0.0, help="shape readout noise (mm)")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--svg", default=None, help="write the error curves here")
    args = ap.parse_args()

    cfg = replace(ExcitationConfig(), ticks=args.ticks, sigma=args.sigma, seed=args.seed)
    image, shape = excitation_learning(cfg)
    for name, err in (("image", image), ("shape", shape)):
        print(f"{name} flow error: start {np.mean(err[:50]):.4g}, end {np.mean(err[-50:]):.4g}, "
              f"settled at tick {converged_tick(err)}")
    if args.svg:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        fig, ax = plt.subplots(2, 1, sharex=True, figsize=(7, 5))
        t = np.arange(len(image)) * cfg.dt
        ax[0].semilogy(t, image)
        ax[0].set_ylabel("image (px/s)")
        ax[1].semilogy(t, shape)
        ax[1].set_ylabel("shape (mm/s)")
        ax[1].set_xlabel("time (s)")
        fig.tight_layout()
        fig.savefig(args.svg)


if __name__ == "__main__":
    main()
