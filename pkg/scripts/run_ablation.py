#!/usr/bin/env python3
"""Which TT core to train: step-wise F1 for every core-selection arm -> results/ablation_cores.csv."""
import argparse
from pathlib import Path

from lora_edge.harness.config import ExperimentConfig, load_config
from lora_edge.harness.experiment import run_ablation_cores, write_csv

RESULTS = Path(__file__).resolve().parent.parent / "results"

ap = argparse.ArgumentParser()
ap.add_argument("--config", type=Path)
ap.add_argument("--out", type=Path, default=RESULTS / "ablation_cores.csv")
args = ap.parse_args()

cfg = load_config(args.config) if args.config else ExperimentConfig()
rows = run_ablation_cores(cfg)
write_csv(args.out, rows)

arms = list(dict.fromkeys(r["arm"] for r in rows))
f1 = {(r["arm"], r["step"]): r["macro_f1"] for r in rows}
trainable = {r["arm"]: r["trainable"] for r in rows}
evaluated = {r["step"] for r in rows}
checkpoints = [s for s in dict.fromkeys((0, 1, 5, 10, 25, cfg.steps)) if s in evaluated]
print(f"{'arm':12s} {'params':>7s} " + " ".join(f"{'@' + str(s):>7s}" for s in checkpoints))
for arm in arms:
    print(f"{arm:12s} {trainable[arm]:7d} " + " ".join(f"{f1[(arm, s)]:7.4f}" for s in checkpoints))
print(f"wrote {args.out}")
