#!/usr/bin/env python3
"""All fine-tuning methods on one fixture; writes results/comparison.csv.

    python scripts/run_comparison.py [--config configs/default.yaml]
"""
import argparse
import logging
from pathlib import Path

from lora_edge.harness.config import ExperimentConfig, load_config
from lora_edge.harness.experiment import build_fixture, comparison_rows, run_comparison, write_csv

RESULTS = Path(__file__).resolve().parent.parent / "results"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", type=Path)
    ap.add_argument("--out", type=Path, default=RESULTS / "comparison.csv")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    fx = build_fixture(cfg)
    print(f"source test F1 {fx.source_test_f1:.4f}, zero-shot on target {fx.zero_shot_f1:.4f}")
    rows = comparison_rows(run_comparison(cfg))
    print(f"{'method':10s} {'train %':>8s} {'final F1':>9s} {'std':>7s} {'->85%':>6s} {'->90%':>6s}")
    for r in rows:
        print(f"{r['method']:10s} {r['trainable_pct']:>8} {r['final_f1_mean']:9.4f} {r['final_f1_std']:7.4f} "
              f"{r['steps_to_85pct_full']!s:>6} {r['steps_to_90pct_full']!s:>6}")
    write_csv(args.out, rows)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
