"""Experiment configuration dataclasses and YAML loading."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

PEFT_LR = 0.01
FULL_FT_LR = 0.001


def default_lr(method: str) -> float:
    return FULL_FT_LR if method == "full" else PEFT_LR


@dataclass
class DataConfig:
    classes: int = 8
    channels: int = 3
    length: int = 32
    per_class: int = 100
    seed: int = 0
    family_seed: int = 0


@dataclass
class ExperimentConfig:
    seed: int = 0
    backbone: str = "tresnet-toy"
    source: DataConfig = field(default_factory=lambda: DataConfig(per_class=150, seed=0))
    target: DataConfig = field(default_factory=lambda: DataConfig(per_class=100, seed=1))
    shift: str = "rotation:angle=30"
    pretrain_steps: int = 200
    pretrain_lr: float = 0.01
    method: str = "lora-edge"
    rank: int = 2  # TT rank for lora-edge
    lora_rank: int = 1  # r for lora-c / lora-linear
    steps: int = 50
    batch_size: int = 64
    lr: float | None = None  # None -> method default
    eval_interval: int = 1
    train_fraction: float = 0.8
    sigma2: float = 1e-3
    train_head: bool = False
    trainable_cores: tuple[int, ...] = (1,)
    freeze_bn_stats: bool = True
    sweep_lrs: tuple[float, ...] = (0.001, 0.01, 0.05)
    sweep_sigma2s: tuple[float, ...] = (1e-4, 1e-3, 1e-2)
    sweep_seeds: tuple[int, ...] = (0, 1)
    compare_seeds: tuple[int, ...] = (0, 1, 2, 3, 4)  # method comparison averages over these
    out: str | None = None

    def learning_rate(self, method: str | None = None) -> float:
        return self.lr if self.lr is not None else default_lr(method or self.method)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _from_dict(cls, data: dict):
    kwargs = {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, val in data.items():
        key = key.replace("-", "_")
        if key not in fields:
            raise ValueError(f"unknown {cls.__name__} field {key!r}")
        if key in ("source", "target"):
            base = getattr(cls(), key)
            if isinstance(val, dict):
                known = {f.name for f in dataclasses.fields(DataConfig)}
                val = {k.replace("-", "_"): v for k, v in val.items()}
                unknown = set(val) - known
                if unknown:
                    raise ValueError(f"unknown DataConfig fields {sorted(unknown)}")
                val = dataclasses.replace(base, **val)
        elif isinstance(val, list):
            val = tuple(val)
        kwargs[key] = val
    return cls(**kwargs)


def load_config(path) -> ExperimentConfig:
    data = yaml.safe_load(Path(path).read_text()) or {}
    return _from_dict(ExperimentConfig, data)


def config_from_dict(data: dict) -> ExperimentConfig:
    return _from_dict(ExperimentConfig, data)
