"""Pretraining, fine-tuning loops and the multi-run experiments built on them."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import nn
from ..nn import AdamState, Model, adam_step, backward, forward, softmax_cross_entropy
from ..peft import ParamReport, param_report, prepare
from .config import ExperimentConfig
from .data import ShiftSpec, WindowDataset, apply_shift, gen_synthetic, split
from .metrics import confusion_matrix, macro_f1

log = logging.getLogger(__name__)

def ablation_arms(d: int = 4) -> tuple:
    """(name, trainable cores, zero-initialized cores) for kernels with ``d`` cores.

    A single-core arm zeroes the core it trains so every arm starts at zero-shot
    except "All", which keeps the full TT-SVD copy live.
    """
    every = tuple(range(1, d + 1))
    return tuple((f"G{k}", (k,), (k,)) for k in every) + (("All", every, ()), ("All+zero-G1", every, (1,)))


ABLATION_ARMS = ablation_arms(4)


@dataclass
class RunResult:
    method: str | None
    eval_steps: list[int] = field(default_factory=list)
    f1: list[float] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)  # one per optimizer step
    confusion: np.ndarray | None = None
    report: ParamReport | None = None
    adam_steps: int = 0
    batch_size: int = 0
    lr: float = 0.0
    seconds: float = 0.0  # wall clock, informational only

    @property
    def final_f1(self) -> float:
        return self.f1[-1]

    @property
    def zero_shot_f1(self) -> float:
        return self.f1[0]

    def f1_at(self, step: int) -> float:
        return self.f1[self.eval_steps.index(step)]

    def same_as(self, other: "RunResult") -> bool:
        return (
            self.eval_steps == other.eval_steps and self.f1 == other.f1 and self.losses == other.losses
            and np.array_equal(self.confusion, other.confusion)
        )


def predict(m: Model, x: np.ndarray, batch: int = 256) -> np.ndarray:
    out = [forward(m, x[s : s + batch], "eval")[0].argmax(axis=1) for s in range(0, len(x), batch)]
    return np.concatenate(out)


def evaluate(m: Model, d: WindowDataset) -> tuple[float, np.ndarray]:
    pred = predict(m, d.inputs_for(m.input_shape))
    cm = confusion_matrix(d.labels, pred, d.class_count)
    return macro_f1(cm), cm


def pretrain(m: Model, d: WindowDataset, steps: int, lr: float = 0.01, seed: int = 0, batch_size: int = 64) -> list[float]:
    """Full training on source data with batch-statistics BatchNorm."""
    rng = np.random.default_rng(seed)
    x = d.inputs_for(m.input_shape)
    state = AdamState()
    losses = []
    for _ in range(steps):
        idx = rng.integers(0, len(d), size=batch_size)
        logits, cache = forward(m, x[idx], "train")
        loss, g = softmax_cross_entropy(logits, d.labels[idx])
        adam_step(m, backward(m, cache, g), state, lr)
        losses.append(loss)
    return losses


def finetune(m: Model, target: WindowDataset, cfg: ExperimentConfig) -> RunResult:
    """Adapt a prepared model on the 80% split, evaluating macro-F1 on the 20% split."""
    if m.method is None:
        raise ValueError("model has no fine-tuning method attached; call peft.prepare first")
    if len(target) < 2:
        raise ValueError("target dataset needs at least 2 windows")
    if cfg.eval_interval < 1:
        raise ValueError("eval_interval must be >= 1")
    lr = cfg.learning_rate(m.method)
    mode = "eval" if cfg.freeze_bn_stats else "train"
    train, test = split(target, cfg.train_fraction, cfg.seed)
    x = train.inputs_for(m.input_shape)
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    result = RunResult(method=m.method, report=param_report(m), batch_size=cfg.batch_size, lr=lr)
    t0 = time.perf_counter()

    def record(step):
        f1, cm = evaluate(m, test)
        result.eval_steps.append(step)
        result.f1.append(f1)
        result.confusion = cm

    record(0)
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, len(train), size=cfg.batch_size)
        logits, cache = forward(m, x[idx], mode)
        loss, g = softmax_cross_entropy(logits, train.labels[idx])
        adam_step(m, backward(m, cache, g), state, lr)
        result.losses.append(loss)
        if step % cfg.eval_interval == 0 or step == cfg.steps:
            record(step)
    result.adam_steps = state.step
    result.seconds = time.perf_counter() - t0
    return result


def steps_to_threshold(result: RunResult, target_f1: float) -> int | None:
    for step, f1 in zip(result.eval_steps, result.f1):
        if f1 >= target_f1:
            return step
    return None


@dataclass
class Fixture:
    source: WindowDataset
    target: WindowDataset
    model: Model  # pretrained on source, never mutated; callers take copies
    source_test_f1: float
    zero_shot_f1: float
    pretrain_losses: list[float]


_FIXTURES: dict[tuple, Fixture] = {}


def _fixture_key(cfg: ExperimentConfig) -> tuple:
    return (cfg.backbone, repr(cfg.source), repr(cfg.target), cfg.shift, cfg.pretrain_steps, cfg.pretrain_lr, cfg.seed)


def build_fixture(cfg: ExperimentConfig) -> Fixture:
    """Source data, shifted target data and a source-pretrained backbone (memoized)."""
    key = _fixture_key(cfg)
    if key in _FIXTURES:
        return _FIXTURES[key]
    s, t = cfg.source, cfg.target
    source = gen_synthetic(s.classes, s.channels, s.length, s.per_class, s.seed, s.family_seed)
    target_raw = gen_synthetic(t.classes, t.channels, t.length, t.per_class, t.seed, t.family_seed)
    target = apply_shift(target_raw, ShiftSpec.parse(cfg.shift))
    target.domain_tag = "target"
    src_train, src_test = split(source, cfg.train_fraction, cfg.seed)
    model = nn.build_backbone(cfg.backbone, s.channels, s.length, s.classes, seed=cfg.seed)
    losses = pretrain(model, src_train, cfg.pretrain_steps, cfg.pretrain_lr, cfg.seed, cfg.batch_size)
    _, tgt_test = split(target, cfg.train_fraction, cfg.seed)
    fx = Fixture(
        source=source, target=target, model=model,
        source_test_f1=evaluate(model, src_test)[0],
        zero_shot_f1=evaluate(model, tgt_test)[0],
        pretrain_losses=losses,
    )
    _FIXTURES[key] = fx
    return fx


def run_method(fx: Fixture, cfg: ExperimentConfig, method: str, **attach_kw) -> tuple[RunResult, Model]:
    m = fx.model.copy()
    if method == "lora-edge":
        attach_kw.setdefault("trainable_cores", cfg.trainable_cores)
        attach_kw.setdefault("train_head", cfg.train_head)
        prepare(m, method, cfg.rank, **attach_kw)
    elif method in ("lora-c", "lora-linear"):
        attach_kw.setdefault("sigma2", cfg.sigma2)
        attach_kw.setdefault("seed", cfg.seed)
        if method == "lora-c":
            attach_kw.setdefault("train_head", cfg.train_head)
        prepare(m, method, cfg.lora_rank, **attach_kw)
    elif method in ("bias", "bn"):
        prepare(m, method, train_head=cfg.train_head)
    else:
        prepare(m, method)
    return finetune(m, fx.target, cfg), m


COMPARISON_METHODS = ("full", "bias", "bn", "lora-c", "lora-edge")


def run_comparison(cfg: ExperimentConfig, methods=COMPARISON_METHODS) -> dict[str, list[RunResult]]:
    """Every method on the same fixture, one run per seed in ``cfg.compare_seeds``."""
    fx = build_fixture(cfg)
    seeds = cfg.compare_seeds or (cfg.seed,)
    out = {}
    for method in methods:
        if method == "lora-c" and any(L.kind == "conv1d" for L in fx.model.layers):
            continue
        out[method] = [run_method(fx, cfg.replace(seed=s), method)[0] for s in seeds]
        log.info("%s: mean final F1 %.4f", method, mean_curve(out[method])[1][-1])
    return out


def mean_curve(runs: list[RunResult]) -> tuple[list[int], list[float]]:
    """Seed-averaged F1 curve; all runs share one eval schedule."""
    steps = runs[0].eval_steps
    if any(r.eval_steps != steps for r in runs):
        raise ValueError("runs have different eval schedules")
    return steps, [float(v) for v in np.mean([r.f1 for r in runs], axis=0)]


def comparison_rows(results: dict[str, list[RunResult]]) -> list[dict]:
    """One row per method: seed-averaged F1 and steps to 85% / 90% of full fine-tuning's final F1."""
    bound = mean_curve(results["full"])[1][-1] if "full" in results else None
    rows = []
    for method, runs in results.items():
        steps, curve = mean_curve(runs)
        finals = [r.final_f1 for r in runs]
        row = {
            "method": method,
            "trainable": runs[0].report.trainable,
            "trainable_pct": runs[0].report.percent,
            "zero_shot_f1": curve[0],
            "step1_f1": curve[1] if len(curve) > 1 else curve[0],
            "final_f1_mean": float(np.mean(finals)),
            "final_f1_std": float(np.std(finals)),
            "seeds": len(runs),
        }
        for frac in (85, 90):
            hit = None
            if bound is not None:
                hit = next((s for s, f in zip(steps, curve) if f >= frac / 100 * bound), None)
            row[f"steps_to_{frac}pct_full"] = "" if hit is None else hit
        rows.append(row)
    return rows


def run_ablation_cores(cfg: ExperimentConfig) -> list[dict]:
    """Step-wise F1 for the six core-selection arms, one row per (step, arm)."""
    fx = build_fixture(cfg)
    arms = ablation_arms(max(fx.model.params[(i, "weight")].ndim for i in fx.model.conv_layers()))
    results = {}
    for name, cores, zero in arms:
        res, _ = run_method(fx, cfg, "lora-edge", trainable_cores=cores, zero_init=zero)
        results[name] = res
    rows = []
    steps = results[arms[0][0]].eval_steps
    for j, step in enumerate(steps):
        for name, _, _ in arms:
            r = results[name]
            rows.append({
                "step": step,
                "arm": name,
                "macro_f1": r.f1[j],
                "loss": r.losses[step - 1] if step else float("nan"),
                "trainable": r.report.trainable,
            })
    return rows


def run_init_sweep(cfg: ExperimentConfig) -> list[dict]:
    """Mean F1(TT-SVD init) - F1(random init) per (learning rate, sigma2) cell."""
    if not cfg.sweep_lrs or not cfg.sweep_sigma2s or not cfg.sweep_seeds:
        raise ValueError("init sweep needs non-empty lrs, sigma2s and seeds")
    fx = build_fixture(cfg)
    rows = []
    for lr in cfg.sweep_lrs:
        tt_runs = {}
        for seed in cfg.sweep_seeds:
            run_cfg = cfg.replace(lr=lr, seed=seed)
            tt_runs[seed] = run_method(fx, run_cfg, "lora-edge")[0].final_f1
        for sigma2 in cfg.sweep_sigma2s:
            deltas, rand_f1 = [], []
            for seed in cfg.sweep_seeds:
                run_cfg = cfg.replace(lr=lr, seed=seed)
                r, _ = run_method(fx, run_cfg, "lora-edge", init="random", sigma2=sigma2, seed=seed)
                rand_f1.append(r.final_f1)
                deltas.append(tt_runs[seed] - r.final_f1)
            rows.append({
                "lr": lr,
                "sigma2": sigma2,
                "delta_f1": float(np.mean(deltas)),
                "f1_ttsvd": float(np.mean([tt_runs[s] for s in cfg.sweep_seeds])),
                "f1_random": float(np.mean(rand_f1)),
                "runs": len(deltas),
            })
    return rows


def fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{v:.6g}"
    return str(v)


def write_csv(path, rows: list[dict], header: list[str] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = header or list(rows[0])
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(row[h]) for h in header])
    return path


def run_rows(result: RunResult) -> list[dict]:
    return [
        {
            "step": s,
            "macro_f1": f1,
            "loss": result.losses[s - 1] if s else float("nan"),
        }
        for s, f1 in zip(result.eval_steps, result.f1)
    ]


def confusion_rows(cm: np.ndarray) -> list[dict]:
    return [{"true": i, **{f"pred_{j}": int(v) for j, v in enumerate(row)}} for i, row in enumerate(cm)]


__all__ = [
    "ABLATION_ARMS", "Fixture", "RunResult", "ablation_arms", "build_fixture", "comparison_rows", "evaluate",
    "finetune", "mean_curve", "pretrain", "run_ablation_cores", "run_comparison", "run_init_sweep", "run_method",
    "steps_to_threshold", "write_csv",
]
