#!/usr/bin/env python3
"""TT-SVD versus random TT initialization over a (learning rate, sigma2) grid -> results/init_sweep.csv.

Each cell holds F1(TT-SVD) - F1(random), averaged over the configured seeds.
"""
import argparse
from pathlib import Path

import numpy as np

from lora_edge.harness.config import ExperimentConfig, load_config
from lora_edge.harness.experiment import run_init_sweep, write_csv

RESULTS = Path(__file__).resolve().parent.parent / "results"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", type=Path)
    ap.add_argument("--out", type=Path, default=RESULTS / "init_sweep.csv")
    args = ap.parse_args()
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    rows = run_init_sweep(cfg.replace(eval_interval=max(cfg.steps, 1)))
    write_csv(args.out, rows)

    grid = {(r["lr"], r["sigma2"]): r["delta_f1"] for r in rows}
    print("dF1 (rows: lr, cols: sigma2)")
    print(" " * 8 + "".join(f"{s:>10g}" for s in cfg.sweep_sigma2s))
    for lr in cfg.sweep_lrs:
        print(f"{lr:8g}" + "".join(f"{grid[(lr, s)]:+10.4f}" for s in cfg.sweep_sigma2s))
    print(f"mean dF1 {np.mean(list(grid.values())):+.4f}; wrote {args.out}")


if __name__ == "__main__":
    main()
