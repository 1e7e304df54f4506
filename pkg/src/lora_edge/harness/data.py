"""Synthetic multi-channel sensor windows and domain shifts applied to them."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SHIFT_KINDS = ("none", "rotation", "channel-permutation", "gain-offset", "user-style")


@dataclass
class WindowDataset:
    windows: np.ndarray  # [N, channels, length]
    labels: np.ndarray  # [N] int64
    class_count: int
    domain_tag: str = "source"

    def __post_init__(self):
        self.windows = np.asarray(self.windows, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) < 1 or len(self.labels) != len(self.windows):
            raise ValueError("dataset needs N >= 1 windows with one label each")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    @property
    def channels(self) -> int:
        return self.windows.shape[1]

    @property
    def length(self) -> int:
        return self.windows.shape[-1]

    def inputs_for(self, input_shape) -> np.ndarray:
        """Windows laid out for a model: [N, C, L] for conv1d, [N, 1, C, L] for conv2d."""
        if len(input_shape) == self.windows.ndim:
            return self.windows[:, None]
        return self.windows

    def subset(self, idx) -> "WindowDataset":
        return WindowDataset(self.windows[idx], self.labels[idx], self.class_count, self.domain_tag)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)


def _class_templates(classes: int, channels: int, length: int, family_seed: int):
    rng = np.random.default_rng([family_seed, classes, channels, length])
    top = max(3, length // 6)
    freqs = rng.integers(1, top + 1, size=(classes, channels))
    amps = rng.uniform(0.6, 1.4, size=(classes, channels))
    phases = rng.uniform(0, 2 * np.pi, size=(classes, channels))
    gravity = rng.standard_normal((classes, channels))
    gravity /= np.linalg.norm(gravity, axis=1, keepdims=True)
    return freqs, amps, phases, gravity


def gen_synthetic(
    classes: int, channels: int, length: int, n_per_class: int, seed: int,
    family_seed: int = 0, noise: float = 0.8, gravity_scale: float = 2.0,
) -> WindowDataset:
    """Balanced dataset; class c is a sinusoid family with class-specific per-channel
    frequency, amplitude, phase coupling and a static orientation (gravity) vector.

    ``family_seed`` fixes the class templates so datasets drawn with different
    ``seed`` values share classes.
    """
    if min(classes, channels, length, n_per_class) < 1:
        raise ValueError("classes, channels, length and n_per_class must all be >= 1")
    freqs, amps, phases, gravity = _class_templates(classes, channels, length, family_seed)
    rng = np.random.default_rng(seed)
    n = classes * n_per_class
    labels = np.repeat(np.arange(classes), n_per_class)
    t = np.arange(length) / length
    common = rng.uniform(0, 2 * np.pi, size=(n, 1, 1))
    jitter = 1.0 + 0.15 * rng.standard_normal((n, channels, 1))
    f = freqs[labels][..., None] * (1.0 + 0.05 * rng.standard_normal((n, 1, 1)))
    x = amps[labels][..., None] * jitter * np.sin(2 * np.pi * f * t + phases[labels][..., None] + common)
    x += gravity_scale * gravity[labels][..., None]
    x += noise * rng.standard_normal((n, channels, length))
    return WindowDataset(x, labels, classes, "source")


@dataclass
class ShiftSpec:
    kind: str = "none"
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SHIFT_KINDS:
            raise ValueError(f"unknown shift kind {self.kind!r}; choose from {SHIFT_KINDS}")

    @classmethod
    def parse(cls, text: str) -> "ShiftSpec":
        """``kind[:key=value,...]``, e.g. ``rotation:angle=30`` or ``channel-permutation:perm=2/0/1``."""
        kind, _, rest = text.strip().partition(":")
        params, seed = {}, 0
        for item in filter(None, rest.split(",")):
            key, _, val = item.partition("=")
            key = key.strip()
            if "/" in val:
                parsed = [float(v) for v in val.split("/")]
            else:
                parsed = float(val)
            if key == "seed":
                seed = int(parsed)
            else:
                params[key] = parsed
        return cls(kind or "none", params, seed)

    def __str__(self):
        items = [f"{k}={'/'.join(f'{x:g}' for x in v) if isinstance(v, list) else f'{v:g}'}" for k, v in self.params.items()]
        if self.seed:
            items.append(f"seed={self.seed}")
        return self.kind + (":" + ",".join(items) if items else "")


def _rotation_matrix(angle_deg: float, axis: str) -> np.ndarray:
    a = np.deg2rad(angle_deg)
    c, s = np.cos(a), np.sin(a)
    if axis == "z":
        return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    if axis == "y":
        return np.array([[c, 0, s], [0, 1.0, 0], [-s, 0, c]])
    return np.array([[1.0, 0, 0], [0, c, -s], [0, s, c]])


def apply_shift(d: WindowDataset, s: ShiftSpec) -> WindowDataset:
    x = d.windows.copy()
    p = s.params
    c = d.channels
    if s.kind == "rotation":
        if c % 3:
            raise ValueError(f"rotation needs a multiple of 3 channels, got {c}")
        axis = {0: "x", 1: "y", 2: "z"}.get(int(p.get("axis", 2)), "z")
        R = _rotation_matrix(p.get("angle", 0.0), axis)
        x = np.einsum("ij,ngjl->ngil", R, x.reshape(len(x), c // 3, 3, -1)).reshape(x.shape)
    elif s.kind == "channel-permutation":
        if "perm" in p:
            perm = np.asarray(p["perm"], dtype=int)
        else:
            perm = np.random.default_rng(s.seed).permutation(c)
        if sorted(perm.tolist()) != list(range(c)):
            raise ValueError(f"{perm.tolist()} is not a permutation of {c} channels")
        x = x[:, perm]
    elif s.kind == "gain-offset":
        gain = np.broadcast_to(np.asarray(p.get("gain", 1.0), dtype=float), (c,))
        offset = np.broadcast_to(np.asarray(p.get("offset", 0.0), dtype=float), (c,))
        x = x * gain[None, :, None] + offset[None, :, None]
    elif s.kind == "user-style":
        stretch = p.get("stretch", 1.0)
        if stretch != 1.0:
            L = d.length
            src = np.arange(L) * stretch
            grid = np.arange(L)
            x = np.stack([[np.interp(src, grid, ch, period=L) for ch in w] for w in x])
        x = x * p.get("amplitude", 1.0)
        if p.get("noise", 0.0):
            x = x + p["noise"] * np.random.default_rng(s.seed).standard_normal(x.shape)
    tag = d.domain_tag if s.kind == "none" else f"{d.domain_tag}+{s}"
    return WindowDataset(x, d.labels.copy(), d.class_count, tag)


def split(d: WindowDataset, train_fraction: float = 0.8, seed: int = 0) -> tuple[WindowDataset, WindowDataset]:
    """Stratified split; every class with >= 2 windows lands in both parts."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in range(d.class_count):
        idx = np.flatnonzero(d.labels == c)
        idx = idx[rng.permutation(len(idx))]
        k = int(round(train_fraction * len(idx)))
        if len(idx) >= 2:
            k = min(max(k, 1), len(idx) - 1)
        train.extend(idx[:k])
        test.extend(idx[k:])
    return d.subset(np.sort(train)), d.subset(np.sort(test))


def save_dataset(d: WindowDataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "shape": list(d.windows.shape),
        "class_count": d.class_count,
        "domain_tag": d.domain_tag,
        "windows": {"file": "windows.bin", "dtype": "<f8"},
        "labels": {"file": "labels.bin", "dtype": "<i8"},
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    (path / "windows.bin").write_bytes(d.windows.astype("<f8").tobytes())
    (path / "labels.bin").write_bytes(d.labels.astype("<i8").tobytes())
    return path


def load_dataset(path) -> WindowDataset:
    path = Path(path)
    meta = json.loads((path / "meta.json").read_text())
    shape = meta["shape"]
    x = np.frombuffer((path / meta["windows"]["file"]).read_bytes(), dtype="<f8")
    y = np.frombuffer((path / meta["labels"]["file"]).read_bytes(), dtype="<i8")
    if x.size != np.prod(shape) or y.size != shape[0]:
        raise ValueError(f"dataset blobs in {path} do not match meta shape {shape}")
    return WindowDataset(x.reshape(shape).astype(np.float64), y.astype(np.int64), meta["class_count"], meta["domain_tag"])
