#!/usr/bin/env python3
"""Print how hard a fixture is: source accuracy, zero-shot drop per shift and noise level.

Used once to pick the generator defaults; rerun after changing the generator.
"""
import argparse
from pathlib import Path

from lora_edge.harness.config import ExperimentConfig, load_config
from lora_edge.harness.experiment import build_fixture

SHIFTS = ["none", "rotation:angle=15", "rotation:angle=30", "rotation:angle=60",
          "channel-permutation:perm=1/2/0", "gain-offset:gain=1.5,offset=0.5",
          "user-style:stretch=0.8,amplitude=0.7,noise=0.3"]

ap = argparse.ArgumentParser()
ap.add_argument("--config", type=Path)
args = ap.parse_args()
base = load_config(args.config) if args.config else ExperimentConfig()

print(f"{'shift':48s} {'source F1':>9s} {'zero-shot':>9s} {'drop':>7s}")
for shift in SHIFTS:
    fx = build_fixture(base.replace(shift=shift))
    print(f"{shift:48s} {fx.source_test_f1:9.4f} {fx.zero_shot_f1:9.4f} {fx.source_test_f1 - fx.zero_shot_f1:7.4f}")
