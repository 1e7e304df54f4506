"""``lora-edge`` command line."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import nn
from .bundle import load_model, save_model
from .harness.config import ExperimentConfig, load_config
from .harness.data import ShiftSpec, apply_shift, gen_synthetic, load_dataset, save_dataset, split
from .harness.experiment import (
    COMPARISON_METHODS, comparison_rows, confusion_rows, evaluate, finetune, fmt, pretrain, run_ablation_cores,
    run_comparison, run_init_sweep, run_rows, write_csv,
)
from .harness.metrics import per_class_f1
from .peft import METHODS, merge_adapters, param_report, prepare

log = logging.getLogger("lora_edge")


def cmd_gen_data(a):
    d = gen_synthetic(a.classes, a.channels, a.length, a.per_class, a.seed, a.family_seed, a.noise)
    if a.shift:
        d = apply_shift(d, ShiftSpec.parse(a.shift))
    save_dataset(d, a.out)
    print(f"wrote {len(d)} windows of shape {d.windows.shape[1:]} ({d.class_count} classes) to {a.out}")


def cmd_pretrain(a):
    d = load_dataset(a.data)
    m = nn.build_backbone(a.backbone, d.channels, d.length, d.class_count, seed=a.seed)
    train, test = split(d, a.train_fraction, a.seed)
    losses = pretrain(m, train, a.steps, a.lr, a.seed, a.batch_size)
    f1, _ = evaluate(m, test)
    save_model(m, a.out)
    print(f"pretrained {a.backbone} for {a.steps} steps: loss {losses[-1] if losses else float('nan'):.4f}, "
          f"held-out macro-F1 {f1:.4f}; saved {a.out}")


def _attach_kwargs(a) -> dict:
    kw = {}
    if a.method == "lora-edge":
        kw["trainable_cores"] = tuple(a.cores)
        kw["train_head"] = a.train_head
    elif a.method in ("lora-c", "lora-linear"):
        kw["sigma2"] = a.sigma2
        kw["seed"] = a.seed
        if a.method == "lora-c":
            kw["train_head"] = a.train_head
    elif a.method in ("bias", "bn"):
        kw["train_head"] = a.train_head
    return kw


def cmd_finetune(a):
    m = load_model(a.model)
    if m.method is not None:
        sys.exit(f"error: {a.model} already carries a {m.method} adaptation")
    d = apply_shift(load_dataset(a.data), ShiftSpec.parse(a.shift))
    prepare(m, a.method, a.rank, **_attach_kwargs(a))
    cfg = ExperimentConfig(
        seed=a.seed, method=a.method, steps=a.steps, batch_size=a.batch_size, lr=a.lr,
        eval_interval=a.eval_interval, train_fraction=a.train_fraction, freeze_bn_stats=not a.bn_train_mode,
    )
    res = finetune(m, d, cfg)
    rep = res.report
    print(f"{a.method}: trainable {rep.trainable} / {rep.full_ft} ({rep.percent}%), lr {res.lr:g}")
    print(f"macro-F1 {res.zero_shot_f1:.4f} -> {res.final_f1:.4f} after {res.adam_steps} steps")
    if a.report:
        write_csv(a.report, run_rows(res))
    if a.out:
        save_model(m, a.out)
        print(f"saved {a.out}")


def cmd_merge(a):
    m = merge_adapters(load_model(a.model))
    save_model(m, a.out)
    print(f"merged adapters into {len(m.conv_layers())} conv layers; saved {a.out}")


def cmd_eval(a):
    m = load_model(a.model)
    d = load_dataset(a.data)
    if a.shift:
        d = apply_shift(d, ShiftSpec.parse(a.shift))
    f1, cm = evaluate(m, d)
    print(f"macro-F1 {f1:.4f} on {len(d)} windows")
    if a.report:
        rows = confusion_rows(cm)
        for row, score in zip(rows, per_class_f1(cm)):
            row["f1"] = float(score)
        blank = {k: "" for k in rows[0]}
        rows.append({**blank, "true": "macro", "f1": f1})
        write_csv(a.report, rows)


def cmd_paramcount(a):
    m = load_model(a.model)
    if a.method:
        if m.method is not None:
            sys.exit(f"error: {a.model} already carries a {m.method} adaptation")
        prepare(m, a.method, a.rank)
    for line in param_report(m).lines():
        print(line)


def _config(a) -> ExperimentConfig:
    cfg = load_config(a.config) if a.config else ExperimentConfig()
    if a.out:
        cfg = cfg.replace(out=a.out)
    return cfg


def cmd_ablate_cores(a):
    cfg = _config(a)
    rows = run_ablation_cores(cfg)
    out = cfg.out or "ablation_cores.csv"
    write_csv(out, rows)
    final = max(r["step"] for r in rows)
    for r in rows:
        if r["step"] in (1, final):
            print(f"step {r['step']:3d} {r['arm']:12s} F1 {fmt(r['macro_f1'])}")
    print(f"wrote {out}")


def cmd_init_sweep(a):
    cfg = _config(a)
    rows = run_init_sweep(cfg)
    out = cfg.out or "init_sweep.csv"
    write_csv(out, rows)
    for r in rows:
        print(f"lr {fmt(r['lr']):>6} sigma2 {fmt(r['sigma2']):>6} dF1 {r['delta_f1']:+.4f}")
    print(f"mean dF1 {np.mean([r['delta_f1'] for r in rows]):+.4f}; wrote {out}")


def cmd_compare(a):
    cfg = _config(a)
    rows = comparison_rows(run_comparison(cfg, a.methods or COMPARISON_METHODS))
    for r in rows:
        print(f"{r['method']:10s} {r['trainable_pct']:>8}%  F1 {r['zero_shot_f1']:.4f} -> "
              f"{r['final_f1_mean']:.4f} +- {r['final_f1_std']:.4f}  steps to 85% of full: {r['steps_to_85pct_full']}")
    out = cfg.out or "comparison.csv"
    write_csv(out, rows)
    print(f"wrote {out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lora-edge", description="TT adapters for conv nets on sensor windows")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic window dataset")
    g.add_argument("--classes", type=int, default=8)
    g.add_argument("--channels", type=int, default=3)
    g.add_argument("--length", type=int, default=32)
    g.add_argument("--per-class", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--family-seed", type=int, default=0, help="fixes the class templates")
    g.add_argument("--noise", type=float, default=0.8)
    g.add_argument("--shift", help="optional shift baked into the saved data")
    g.add_argument("--out", required=True, type=Path)
    g.set_defaults(func=cmd_gen_data)

    g = sub.add_parser("pretrain", help="train a toy backbone from scratch")
    g.add_argument("--data", required=True, type=Path)
    g.add_argument("--backbone", choices=sorted(nn.BACKBONES), default="tresnet-toy")
    g.add_argument("--steps", type=int, default=200)
    g.add_argument("--lr", type=float, default=0.01)
    g.add_argument("--batch-size", type=int, default=64)
    g.add_argument("--train-fraction", type=float, default=0.8)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, type=Path)
    g.set_defaults(func=cmd_pretrain)

    g = sub.add_parser("finetune", help="adapt a pretrained bundle to shifted data")
    g.add_argument("--model", required=True, type=Path)
    g.add_argument("--data", required=True, type=Path)
    g.add_argument("--shift", default="none")
    g.add_argument("--method", choices=METHODS, default="lora-edge")
    g.add_argument("--rank", type=int, help="TT rank for lora-edge (default 2), r for lora-c/lora-linear (default 1)")
    g.add_argument("--cores", type=int, nargs="+", default=[1], help="trainable TT cores (lora-edge)")
    g.add_argument("--sigma2", type=float, default=1e-3, help="init variance of A (lora-c, lora-linear)")
    g.add_argument("--train-head", action="store_true")
    g.add_argument("--steps", type=int, default=50)
    g.add_argument("--lr", type=float, help="default 0.01, or 0.001 for full")
    g.add_argument("--batch-size", type=int, default=64)
    g.add_argument("--eval-interval", type=int, default=1)
    g.add_argument("--train-fraction", type=float, default=0.8)
    g.add_argument("--bn-train-mode", action="store_true", help="update BN running stats while fine-tuning")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", type=Path)
    g.add_argument("--report", type=Path, help="CSV of step, macro_f1, loss")
    g.set_defaults(func=cmd_finetune)

    g = sub.add_parser("merge", help="fold adapters into the backbone weights")
    g.add_argument("--model", required=True, type=Path)
    g.add_argument("--out", required=True, type=Path)
    g.set_defaults(func=cmd_merge)

    g = sub.add_parser("eval", help="macro-F1 and confusion matrix of a bundle")
    g.add_argument("--model", required=True, type=Path)
    g.add_argument("--data", required=True, type=Path)
    g.add_argument("--shift")
    g.add_argument("--report", type=Path)
    g.set_defaults(func=cmd_eval)

    g = sub.add_parser("paramcount", help="trainable parameter report")
    g.add_argument("--model", required=True, type=Path)
    g.add_argument("--method", choices=METHODS, help="report as if this method were attached")
    g.add_argument("--rank", type=int)
    g.set_defaults(func=cmd_paramcount)

    for name, func, text in [
        ("ablate-cores", cmd_ablate_cores, "trainable-core ablation"),
        ("init-sweep", cmd_init_sweep, "TT-SVD vs random init over (lr, sigma2)"),
        ("compare", cmd_compare, "all methods on one fixture"),
    ]:
        g = sub.add_parser(name, help=text)
        g.add_argument("--config", type=Path)
        g.add_argument("--out", help="CSV path (overrides the config's out)")
        if name == "compare":
            g.add_argument("--methods", nargs="+", choices=METHODS)
        g.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (ValueError, RuntimeError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
