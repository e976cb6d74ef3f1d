#!/usr/bin/env python3
"""Short-budget adversarial-weight sweep.

Trains once per lambda in {0.005, 0.01, 0.02, 0.05} for 500 iterations each
on the seed-0 shapes dataset and tabulates best validation MIoU per run.
500 iterations is a smoke budget: the numbers show every weight trains
stably, not which weight is best (the poly schedule never finishes, so
rankings at this budget are not meaningful).

About 10 minutes on a single desktop CPU core.

Usage:
    python3 scripts/lambda_sweep.py [--out runs/sweep] [--iterations 500]
"""

import argparse
import dataclasses
import sys

from seggan.config import parse_run_config
from seggan.trainer import lambda_sweep


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/sweep", help="output directory")
    ap.add_argument("--iterations", type=int, default=500)
    ap.add_argument("--lambdas", default="0.005,0.01,0.02,0.05",
                    help="comma-separated adversarial weights")
    args = ap.parse_args(argv)

    lambdas = [float(v) for v in args.lambdas.split(",") if v.strip()]
    cfg = parse_run_config({})
    train = dataclasses.replace(cfg.train, max_iterations=args.iterations)
    dataset = cfg.make_dataset()
    rows = lambda_sweep(cfg.segnet, cfg.discriminator, train, cfg.loss,
                        dataset, lambdas, out_dir=args.out, log=print)
    print(f"{'lambda':>8}  {'best_miou':>10}  {'best_iter':>9}")
    for lam, miou, it in rows:
        print(f"{lam:>8g}  {miou:>10.4f}  {it:>9}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
