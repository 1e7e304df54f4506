"""A small CNN engine with explicit forward/backward passes and per-slot freeze masks."""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from .tensor import ShapeError, conv_backward, conv_forward

LAYER_KINDS = (
    "conv1d", "conv2d", "batchnorm", "relu", "maxpool",
    "global-avg-pool", "dense", "flatten", "add",
)
BN_MOMENTUM = 0.1
BN_EPS = 1e-5

SlotKey = tuple[int, str]


class StaleCacheError(RuntimeError):
    pass


class FrozenGradientError(RuntimeError):
    """A gradient was supplied for a slot that is not trainable."""


@dataclass
class LayerSpec:
    kind: str
    in_channels: int | None = None
    out_channels: int | None = None
    kernel: int | None = None
    stride: int = 1
    padding: int | None = None  # None -> kernel // 2
    bias: bool = True
    pool: tuple[int, ...] | None = None
    in_features: int | None = None
    units: int | None = None
    skip_from: int | None = None  # add: index of the layer whose input is added

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.pool is not None:
            self.pool = tuple(int(p) for p in np.atleast_1d(self.pool))
        if self.kind in ("conv1d", "conv2d") and self.padding is None:
            self.padding = self.kernel // 2

    @property
    def is_conv(self) -> bool:
        return self.kind in ("conv1d", "conv2d")

    def to_dict(self) -> dict[str, Any]:
        d = {k: v for k, v in asdict(self).items() if v is not None}
        if "pool" in d:
            d["pool"] = list(d["pool"])
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "LayerSpec":
        return cls(**d)


def conv1d(cin, cout, k, stride=1, padding=None, bias=True):
    return LayerSpec("conv1d", in_channels=cin, out_channels=cout, kernel=k, stride=stride, padding=padding, bias=bias)


def conv2d(cin, cout, k, stride=1, padding=None, bias=True):
    return LayerSpec("conv2d", in_channels=cin, out_channels=cout, kernel=k, stride=stride, padding=padding, bias=bias)


def batchnorm(channels):
    return LayerSpec("batchnorm", in_channels=channels)


def dense(fin, units, bias=True):
    return LayerSpec("dense", in_features=fin, units=units, bias=bias)


def relu():
    return LayerSpec("relu")


def maxpool(*pool):
    return LayerSpec("maxpool", pool=pool)


def gap():
    return LayerSpec("global-avg-pool")


def flatten():
    return LayerSpec("flatten")


def add(skip_from):
    return LayerSpec("add", skip_from=skip_from)


def slot_role(name: str) -> str:
    """'backbone', 'buffer' (BN running stats) or 'adapter'."""
    if name.startswith("running_"):
        return "buffer"
    if name.startswith(("tt_", "lora_")):
        return "adapter"
    return "backbone"


def infer_shapes(layers: list[LayerSpec], input_shape: tuple[int, ...]) -> list[tuple[int, ...]]:
    """Per-sample output shape of every layer; raises ShapeError if the chain breaks."""
    shapes = []
    shape = tuple(input_shape)
    inputs = []
    for i, L in enumerate(layers):
        inputs.append(shape)
        where = f"layer {i} ({L.kind})"
        if L.is_conv:
            nsp = 1 if L.kind == "conv1d" else 2
            if len(shape) != nsp + 1 or shape[0] != L.in_channels:
                raise ShapeError(f"{where}: input {shape} incompatible with {L.in_channels} channels, {nsp}D")
            spatial = tuple((n + 2 * L.padding - L.kernel) // L.stride + 1 for n in shape[1:])
            if any(s < 1 for s in spatial):
                raise ShapeError(f"{where}: empty output for input {shape}")
            shape = (L.out_channels,) + spatial
        elif L.kind == "batchnorm":
            if len(shape) < 1 or shape[0] != L.in_channels:
                raise ShapeError(f"{where}: expected {L.in_channels} channels, got {shape}")
        elif L.kind == "maxpool":
            if len(L.pool) != len(shape) - 1:
                raise ShapeError(f"{where}: pool {L.pool} vs spatial dims of {shape}")
            spatial = tuple(n // p for n, p in zip(shape[1:], L.pool))
            if any(s < 1 for s in spatial):
                raise ShapeError(f"{where}: pooling empties input {shape}")
            shape = (shape[0],) + spatial
        elif L.kind == "global-avg-pool":
            if len(shape) < 2:
                raise ShapeError(f"{where}: needs spatial dims, got {shape}")
            shape = (shape[0],)
        elif L.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif L.kind == "dense":
            if shape != (L.in_features,):
                raise ShapeError(f"{where}: expected ({L.in_features},), got {shape}")
            shape = (L.units,)
        elif L.kind == "add":
            if L.skip_from is None or not 0 <= L.skip_from < i or inputs[L.skip_from] != shape:
                raise ShapeError(f"{where}: skip source {L.skip_from} has incompatible shape")
        shapes.append(shape)
    return shapes


def _layer_slots(L: LayerSpec) -> dict[str, tuple[int, ...]]:
    if L.is_conv:
        k = (L.kernel,) * (1 if L.kind == "conv1d" else 2)
        slots = {"weight": (L.out_channels, L.in_channels) + k}
        if L.bias:
            slots["bias"] = (L.out_channels,)
        return slots
    if L.kind == "dense":
        slots = {"weight": (L.units, L.in_features)}
        if L.bias:
            slots["bias"] = (L.units,)
        return slots
    if L.kind == "batchnorm":
        c = (L.in_channels,)
        return {"gamma": c, "beta": c, "running_mean": c, "running_var": c}
    return {}


class Model:
    """Ordered layer list plus a parameter registry keyed by (layer index, slot name)."""

    def __init__(self, layers: list[LayerSpec], input_shape, params=None, trainable=None, seed: int = 0):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.shapes = infer_shapes(self.layers, self.input_shape)
        self.params: dict[SlotKey, np.ndarray] = {}
        self.trainable: dict[SlotKey, bool] = {}
        self.adapters: dict[int, Any] = {}
        self.method: str | None = None
        self.version = 0
        if params is None:
            self._init_params(np.random.default_rng(seed))
        else:
            self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        for key in self.params:
            self.trainable[key] = slot_role(key[1]) != "buffer"
        if trainable is not None:
            self.trainable.update(trainable)

    def _init_params(self, rng: np.random.Generator):
        for i, L in enumerate(self.layers):
            for name, shape in _layer_slots(L).items():
                if name == "weight":
                    fan_in = int(np.prod(shape[1:]))
                    val = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
                elif name in ("gamma", "running_var"):
                    val = np.ones(shape)
                else:
                    val = np.zeros(shape)
                self.params[(i, name)] = val

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes[-1]

    def conv_layers(self) -> list[int]:
        return [i for i, L in enumerate(self.layers) if L.is_conv]

    def dense_layers(self) -> list[int]:
        return [i for i, L in enumerate(self.layers) if L.kind == "dense"]

    def head_index(self) -> int | None:
        d = self.dense_layers()
        return d[-1] if d else None

    def trainable_keys(self) -> list[SlotKey]:
        return [k for k, t in self.trainable.items() if t]

    def freeze_all(self):
        for k in self.trainable:
            self.trainable[k] = False

    def set_trainable(self, key: SlotKey, flag: bool = True):
        if key not in self.params:
            raise KeyError(key)
        if flag and slot_role(key[1]) == "buffer":
            raise ValueError(f"{key} is a running statistic, not an optimizable parameter")
        self.trainable[key] = flag

    def add_slot(self, key: SlotKey, value: np.ndarray, trainable: bool):
        self.params[key] = np.asarray(value, dtype=np.float64)
        self.trainable[key] = trainable
        self.version += 1

    def remove_slot(self, key: SlotKey):
        del self.params[key]
        del self.trainable[key]
        self.version += 1

    def effective_weight(self, i: int) -> np.ndarray:
        w = self.params[(i, "weight")]
        if i in self.adapters:
            return w + self.adapters[i].delta(self, i)
        return w

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def count(self, role: str = "backbone", trainable_only: bool = False) -> int:
        return sum(
            v.size for k, v in self.params.items()
            if slot_role(k[1]) == role and (self.trainable[k] or not trainable_only)
        )

    def flop_count(self) -> int:
        """Multiply-accumulates per sample of conv and dense layers, adapter paths included."""
        total = 0
        for i, L in enumerate(self.layers):
            if L.is_conv:
                w = self.params[(i, "weight")]
                paths = 2 if i in self.adapters else 1
                total += paths * int(np.prod(self.shapes[i][1:])) * w.size
            elif L.kind == "dense":
                paths = 2 if i in self.adapters else 1
                total += paths * self.params[(i, "weight")].size
        return total


@dataclass
class ForwardCache:
    version: int
    mode: str
    inputs: list[np.ndarray] = field(default_factory=list)
    aux: list[Any] = field(default_factory=list)


def _bn_axes(x):
    return (0,) + tuple(range(2, x.ndim))


def _bcast(v, x):
    return v.reshape((1, -1) + (1,) * (x.ndim - 2))


def forward(m: Model, x: np.ndarray, mode: str = "eval") -> tuple[np.ndarray, ForwardCache]:
    """Run the model. ``mode='train'`` normalizes with batch stats and updates running stats."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != m.input_shape:
        raise ShapeError(f"input {x.shape[1:]} does not match model input {m.input_shape}")
    cache = ForwardCache(version=m.version, mode=mode)
    P = m.params
    for i, L in enumerate(m.layers):
        cache.inputs.append(x)
        aux = None
        if L.is_conv:
            y = conv_forward(P[(i, "weight")], x, L.stride, L.padding)
            if i in m.adapters:
                dw = m.adapters[i].delta(m, i)
                y = y + conv_forward(dw, x, L.stride, L.padding)
            if L.bias:
                y = y + _bcast(P[(i, "bias")], y)
        elif L.kind == "dense":
            y = x @ P[(i, "weight")].T
            if i in m.adapters:
                y = y + x @ m.adapters[i].delta(m, i).T
            if L.bias:
                y = y + P[(i, "bias")]
        elif L.kind == "batchnorm":
            axes = _bn_axes(x)
            if mode == "train":
                mean = x.mean(axis=axes)
                var = x.var(axis=axes)
                n = x.size // x.shape[1]
                rm, rv = (i, "running_mean"), (i, "running_var")
                P[rm] = (1 - BN_MOMENTUM) * P[rm] + BN_MOMENTUM * mean
                P[rv] = (1 - BN_MOMENTUM) * P[rv] + BN_MOMENTUM * var * n / max(n - 1, 1)
            else:
                mean, var = P[(i, "running_mean")], P[(i, "running_var")]
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (x - _bcast(mean, x)) * _bcast(inv_std, x)
            y = _bcast(P[(i, "gamma")], x) * xhat + _bcast(P[(i, "beta")], x)
            aux = (xhat, inv_std)
        elif L.kind == "relu":
            y = np.maximum(x, 0.0)
        elif L.kind == "maxpool":
            y, aux = _maxpool_forward(x, L.pool)
        elif L.kind == "global-avg-pool":
            y = x.mean(axis=tuple(range(2, x.ndim)))
        elif L.kind == "flatten":
            y = x.reshape(x.shape[0], -1)
        elif L.kind == "add":
            y = x + cache.inputs[L.skip_from]
        cache.aux.append(aux)
        x = y
    return x, cache


def _maxpool_forward(x, pool):
    nsp = len(pool)
    out = tuple(n // p for n, p in zip(x.shape[2:], pool))
    crop = x[(slice(None), slice(None)) + tuple(slice(0, o * p) for o, p in zip(out, pool))]
    # [B, C, o1, p1, o2, p2] -> [B, C, o1, o2, p1*p2]
    split = crop.reshape(x.shape[:2] + tuple(v for op in zip(out, pool) for v in op))
    perm = (0, 1) + tuple(2 + 2 * j for j in range(nsp)) + tuple(3 + 2 * j for j in range(nsp))
    win = split.transpose(perm).reshape(x.shape[:2] + out + (-1,))
    arg = win.argmax(axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return y, (arg, x.shape, out, perm)


def _maxpool_backward(g, aux, pool):
    arg, in_shape, out, perm = aux
    win = np.zeros(g.shape + (int(np.prod(pool)),))
    np.put_along_axis(win, arg[..., None], g[..., None], axis=-1)
    win = win.reshape(g.shape + tuple(pool))
    inv = np.argsort(perm)
    split = win.transpose(inv)
    crop_shape = in_shape[:2] + tuple(o * p for o, p in zip(out, pool))
    gx = np.zeros(in_shape)
    gx[(slice(None), slice(None)) + tuple(slice(0, c) for c in crop_shape[2:])] = split.reshape(crop_shape)
    return gx


def backward(m: Model, cache: ForwardCache, grad_logits: np.ndarray) -> dict[SlotKey, np.ndarray]:
    """Gradients for trainable slots only; frozen slots get no entry."""
    if cache.version != m.version:
        raise StaleCacheError("parameters changed since this forward pass")
    want = {k for k, t in m.trainable.items() if t}
    if not want:
        return {}
    lowest = min(k[0] for k in want)
    P = m.params
    grads: dict[SlotKey, np.ndarray] = {}
    pending: dict[int, np.ndarray] = {}
    g = np.asarray(grad_logits, dtype=np.float64)
    for i in range(len(m.layers) - 1, lowest - 1, -1):
        L = m.layers[i]
        x = cache.inputs[i]
        aux = cache.aux[i]
        need_x = i > lowest or bool(pending)
        if L.is_conv:
            adapter = m.adapters.get(i)
            w = m.effective_weight(i) if adapter is not None else P[(i, "weight")]
            gw, gx = conv_backward(w, x, g, L.stride, L.padding)
            if m.trainable.get((i, "weight")):
                grads[(i, "weight")] = gw
            if L.bias and m.trainable.get((i, "bias")):
                grads[(i, "bias")] = g.sum(axis=(0,) + tuple(range(2, g.ndim)))
            if adapter is not None:
                grads.update(adapter.backward(m, i, gw))
            g = gx
        elif L.kind == "dense":
            if m.trainable.get((i, "weight")):
                grads[(i, "weight")] = g.T @ x
            if L.bias and m.trainable.get((i, "bias")):
                grads[(i, "bias")] = g.sum(axis=0)
            if i in m.adapters:
                grads.update(m.adapters[i].backward(m, i, g.T @ x))
            g = g @ m.effective_weight(i) if need_x else None
        elif L.kind == "batchnorm":
            xhat, inv_std = aux
            axes = _bn_axes(g)
            if m.trainable.get((i, "gamma")):
                grads[(i, "gamma")] = (g * xhat).sum(axis=axes)
            if m.trainable.get((i, "beta")):
                grads[(i, "beta")] = g.sum(axis=axes)
            dxhat = g * _bcast(P[(i, "gamma")], g)
            if cache.mode == "train":
                n = g.size // g.shape[1]
                s1 = dxhat.sum(axis=axes)
                s2 = (dxhat * xhat).sum(axis=axes)
                g = _bcast(inv_std / n, g) * (n * dxhat - _bcast(s1, g) - xhat * _bcast(s2, g))
            else:
                g = dxhat * _bcast(inv_std, g)
        elif L.kind == "relu":
            g = g * (x > 0)
        elif L.kind == "maxpool":
            g = _maxpool_backward(g, aux, L.pool)
        elif L.kind == "global-avg-pool":
            n = int(np.prod(x.shape[2:]))
            g = np.broadcast_to((g / n).reshape(g.shape + (1,) * (x.ndim - 2)), x.shape).copy()
        elif L.kind == "flatten":
            g = g.reshape(x.shape)
        elif L.kind == "add":
            pending[L.skip_from] = pending.get(L.skip_from, 0) + g
        if i in pending:
            g = g + pending.pop(i)
    return grads


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    b, c = logits.shape
    if labels.shape != (b,) or labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must be {b} integers in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    loss = -logp[np.arange(b), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(b), labels] -= 1.0
    return float(loss), grad / b


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[SlotKey, np.ndarray] = field(default_factory=dict)
    v: dict[SlotKey, np.ndarray] = field(default_factory=dict)


def adam_step(model: Model, grads: dict[SlotKey, np.ndarray], state: AdamState, lr: float) -> AdamState:
    frozen = [k for k in grads if not model.trainable.get(k, False)]
    if frozen:
        raise FrozenGradientError(f"gradients supplied for frozen slots {frozen}")
    missing = [k for k in model.trainable_keys() if k not in grads]
    if missing:
        raise ValueError(f"no gradient for trainable slots {missing}")
    state.step += 1
    t = state.step
    c1 = 1 - state.beta1 ** t
    c2 = 1 - state.beta2 ** t
    for k, g in grads.items():
        p = model.params[k]
        if g.shape != p.shape:
            raise ShapeError(f"gradient {g.shape} does not match slot {k} {p.shape}")
        m = state.m.get(k, np.zeros_like(p))
        v = state.v.get(k, np.zeros_like(p))
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        state.m[k], state.v[k] = m, v
        model.params[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    model.version += 1
    return state


# toy backbones; small stand-ins named after the reference architectures

def tresnet_toy(channels: int, length: int, classes: int, width: int = 8, seed: int = 0) -> Model:
    layers = [
        conv2d(1, width, 3, bias=True), batchnorm(width), relu(),          # 0-2
        conv2d(width, width, 3), batchnorm(width), relu(),                 # 3-5
        conv2d(width, width, 3), batchnorm(width), add(3), relu(),         # 6-9
        maxpool(1, 2),                                                     # 10
        conv2d(width, width, 3), batchnorm(width), relu(),                 # 11-13
        conv2d(width, width, 3), batchnorm(width), add(11), relu(),        # 14-17
        gap(), dense(width, classes),
    ]
    return Model(layers, (1, channels, length), seed=seed)


def mobilenet_toy(channels: int, length: int, classes: int, width: int = 8, seed: int = 0) -> Model:
    w2 = 2 * width
    layers = [
        conv2d(1, width, 3), batchnorm(width), relu(),
        conv2d(width, width, 3), batchnorm(width), relu(),
        conv2d(width, w2, 1), batchnorm(w2), relu(),
        maxpool(1, 2),
        conv2d(w2, w2, 3), batchnorm(w2), relu(),
        conv2d(w2, w2, 1), batchnorm(w2), relu(),
        gap(), dense(w2, classes),
    ]
    return Model(layers, (1, channels, length), seed=seed)


def calanet_toy(channels: int, length: int, classes: int, width: int = 8, seed: int = 0) -> Model:
    layers = [
        conv1d(channels, width, 3), batchnorm(width), relu(),
        conv1d(width, 2 * width, 3), batchnorm(2 * width), relu(), maxpool(2),
        conv1d(2 * width, 4 * width, 3), batchnorm(4 * width), relu(),
        gap(), dense(4 * width, classes),
    ]
    return Model(layers, (channels, length), seed=seed)


BACKBONES = {"tresnet-toy": tresnet_toy, "mobilenet-toy": mobilenet_toy, "calanet-toy": calanet_toy}


def build_backbone(name: str, channels: int, length: int, classes: int, seed: int = 0) -> Model:
    try:
        builder = BACKBONES[name]
    except KeyError:
        raise ValueError(f"unknown backbone {name!r}; choose from {sorted(BACKBONES)}") from None
    return builder(channels, length, classes, seed=seed)


def is_2d(m: Model) -> bool:
    return len(m.input_shape) == 3
