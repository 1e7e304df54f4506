"""Parameter-efficient fine-tuning attachments over ``nn.Model``.

LoRA-Edge puts a tensor-train copy of each pretrained conv kernel on a parallel
path, zeroes the output-channel core and trains only that core; after training
the reconstructed update is folded back into the dense kernel. Matrix LoRA
(dense layers), LoRA-C (flattened conv kernels), Bias-Tuning and BN-Tuning are
the baselines.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .nn import Model, slot_role
from .tensor import conv_backward, conv_forward
from .tt import _clamped_ranks, tt_core_grads, tt_full, tt_svd

METHODS = ("lora-edge", "lora-c", "lora-linear", "bias", "bn", "full")
DEFAULT_SIGMA2 = 1e-3


class AdapterError(RuntimeError):
    pass


@dataclass
class AdapterState:
    method: str
    rank: int
    host_shape: tuple[int, ...]
    slots: list[str]
    trainable: frozenset[str]
    zero_init: frozenset[int] = frozenset()
    effective_rank: int | None = None
    merged: bool = False
    extra: dict = field(default_factory=dict)

    def cores(self, m: Model, i: int) -> list[np.ndarray]:
        return [m.params[(i, s)] for s in self.slots]

    def delta(self, m: Model, i: int) -> np.ndarray:
        if self.merged:
            raise AdapterError(f"adapter on layer {i} is already merged")
        if self.method == "lora-edge":
            return tt_full(self.cores(m, i)).reshape(self.host_shape)
        a, b = m.params[(i, "lora_A")], m.params[(i, "lora_B")]
        return (b @ a).reshape(self.host_shape)

    def backward(self, m: Model, i: int, grad_w: np.ndarray) -> dict:
        """Slot gradients given the gradient w.r.t. the layer's effective weight."""
        want = [s for s in self.slots if m.trainable.get((i, s))]
        if not want:
            return {}
        if self.method == "lora-edge":
            idx = {int(s.rsplit("_", 1)[1]): s for s in want}
            g = tt_core_grads(self.cores(m, i), grad_w, sorted(idx))
            return {(i, idx[k]): v for k, v in g.items()}
        a, b = m.params[(i, "lora_A")], m.params[(i, "lora_B")]
        gmat = grad_w.reshape(b.shape[0], a.shape[1])
        out = {}
        if "lora_A" in want:
            out[(i, "lora_A")] = b.T @ gmat
        if "lora_B" in want:
            out[(i, "lora_B")] = gmat @ a.T
        return out

    def trainable_count(self, m: Model, i: int) -> int:
        return sum(m.params[(i, s)].size for s in self.slots if m.trainable.get((i, s)))

    def to_record(self, layer: int) -> dict:
        return {
            "layer": layer,
            "method": self.method,
            "rank": self.rank,
            "host_shape": list(self.host_shape),
            "slots": list(self.slots),
            "trainable": sorted(self.trainable),
            "zero_init": sorted(self.zero_init),
            "effective_rank": self.effective_rank,
            "merged": self.merged,
            "extra": self.extra,
        }

    @classmethod
    def from_record(cls, rec: dict) -> tuple[int, "AdapterState"]:
        return rec["layer"], cls(
            method=rec["method"],
            rank=rec["rank"],
            host_shape=tuple(rec["host_shape"]),
            slots=list(rec["slots"]),
            trainable=frozenset(rec["trainable"]),
            zero_init=frozenset(rec["zero_init"]),
            effective_rank=rec.get("effective_rank"),
            merged=rec["merged"],
            extra=rec.get("extra", {}),
        )


def _check_fresh(m: Model):
    if m.method is not None:
        raise AdapterError(f"model already prepared for {m.method!r}")


def _freeze_backbone(m: Model, train_head: bool):
    m.freeze_all()
    head = m.head_index()
    if train_head and head is not None:
        for key in m.params:
            if key[0] == head and slot_role(key[1]) == "backbone":
                m.trainable[key] = True


def attach_lora_edge(
    m: Model,
    r_T: int = 2,
    trainable_cores: Iterable[int] = (1,),
    zero_init: Iterable[int] | None = None,
    train_head: bool = False,
    init: str = "tt-svd",
    sigma2: float = DEFAULT_SIGMA2,
    seed: int = 0,
) -> Model:
    """Attach a TT adapter to every conv layer.

    ``zero_init`` defaults to {1}. ``init='random'`` draws every core from
    N(0, sigma2) with the same shapes TT-SVD would produce (zeroed cores stay zero).
    """
    _check_fresh(m)
    if r_T < 1:
        raise ValueError(f"TT rank must be >= 1, got {r_T}")
    if init not in ("tt-svd", "random"):
        raise ValueError(f"unknown init {init!r}")
    convs = m.conv_layers()
    if not convs:
        raise AdapterError("model has no convolutional layers")
    trainable_cores = frozenset(int(k) for k in trainable_cores)
    zero_init = frozenset({1} if zero_init is None else (int(k) for k in zero_init))
    rng = np.random.default_rng(seed)
    _freeze_backbone(m, train_head)
    for i in convs:
        w = m.params[(i, "weight")]
        d = w.ndim
        bad = (trainable_cores | zero_init) - set(range(1, d + 1))
        if bad:
            raise ValueError(f"core indices {sorted(bad)} outside 1..{d} for layer {i}")
        if init == "tt-svd":
            cores = tt_svd(w, r_T).cores
        else:
            ranks = _clamped_ranks(list(w.shape), r_T)
            cores = [rng.standard_normal((ranks[k], n, ranks[k + 1])) * np.sqrt(sigma2)
                     for k, n in enumerate(w.shape)]
        slots = [f"tt_core_{k}" for k in range(1, d + 1)]
        for k, core in enumerate(cores, start=1):
            if k in zero_init:
                m.add_slot((i, f"tt_init_{k}"), core, trainable=False)
                core = np.zeros_like(core)
            m.add_slot((i, f"tt_core_{k}"), core, trainable=k in trainable_cores)
        m.adapters[i] = AdapterState(
            method="lora-edge", rank=r_T, host_shape=w.shape, slots=slots,
            trainable=frozenset(f"tt_core_{k}" for k in trainable_cores),
            zero_init=zero_init, extra={"init": init},
        )
    m.method = "lora-edge"
    m.version += 1
    return m


def lora_edge_forward(m: Model, i: int, x: np.ndarray) -> np.ndarray:
    """Frozen-kernel path plus TT path, without the layer bias."""
    adapter = m.adapters.get(i)
    if adapter is None or adapter.method != "lora-edge":
        raise AdapterError(f"layer {i} has no LoRA-Edge adapter")
    if adapter.merged:
        raise AdapterError(f"adapter on layer {i} is merged")
    L = m.layers[i]
    w = m.params[(i, "weight")]
    return conv_forward(w, x, L.stride, L.padding) + conv_forward(adapter.delta(m, i), x, L.stride, L.padding)


def lora_edge_grad_core1(m: Model, i: int, x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    adapter = m.adapters[i]
    L = m.layers[i]
    dw = adapter.delta(m, i)
    grad_dw, _ = conv_backward(dw, x, grad_out, L.stride, L.padding)
    return tt_core_grads(adapter.cores(m, i), grad_dw, [1])[1]


def restore_zeroed_cores(m: Model):
    """Put the pre-zeroing TT-SVD values back into the live core slots."""
    for i, a in m.adapters.items():
        for k in a.zero_init:
            m.params[(i, f"tt_core_{k}")] = m.params[(i, f"tt_init_{k}")].copy()
    m.version += 1


def _attach_matrix_lora(m, i, a_shape, b_shape, method, r, r_eff, sigma2, rng, host_shape):
    a = rng.standard_normal(a_shape) * np.sqrt(sigma2)
    m.add_slot((i, "lora_A"), a, trainable=True)
    m.add_slot((i, "lora_B"), np.zeros(b_shape), trainable=True)
    m.adapters[i] = AdapterState(
        method=method, rank=r, host_shape=host_shape, slots=["lora_A", "lora_B"],
        trainable=frozenset({"lora_A", "lora_B"}), effective_rank=r_eff, extra={"sigma2": sigma2},
    )


def attach_lora_c(
    m: Model, r: int = 1, sigma2: float = DEFAULT_SIGMA2, seed: int = 0,
    kernel_scaled: bool = True, train_head: bool = False,
) -> Model:
    """LoRA on each conv2d kernel flattened to (k*C_out) x (k*C_in).

    The effective rank is k*r when ``kernel_scaled`` (the usual LoRA-C setting), else r.
    """
    _check_fresh(m)
    if r < 1:
        raise ValueError(f"rank must be >= 1, got {r}")
    if any(L.kind == "conv1d" for L in m.layers):
        raise AdapterError("LoRA-C applies to conv2d layers only")
    convs = m.conv_layers()
    if not convs:
        raise AdapterError("model has no conv2d layers")
    rng = np.random.default_rng(seed)
    _freeze_backbone(m, train_head)
    for i in convs:
        w = m.params[(i, "weight")]
        cout, cin, k, _ = w.shape
        r_eff = k * r if kernel_scaled else r
        _attach_matrix_lora(m, i, (r_eff, k * cin), (k * cout, r_eff), "lora-c", r, r_eff, sigma2, rng, w.shape)
    m.method = "lora-c"
    m.version += 1
    return m


def attach_lora_linear(m: Model, r: int = 1, sigma2: float = DEFAULT_SIGMA2, seed: int = 0) -> Model:
    _check_fresh(m)
    if r < 1:
        raise ValueError(f"rank must be >= 1, got {r}")
    denses = m.dense_layers()
    if not denses:
        raise AdapterError("model has no dense layers")
    rng = np.random.default_rng(seed)
    m.freeze_all()
    for i in denses:
        w = m.params[(i, "weight")]
        M, N = w.shape
        _attach_matrix_lora(m, i, (r, N), (M, r), "lora-linear", r, r, sigma2, rng, w.shape)
    m.method = "lora-linear"
    m.version += 1
    return m


def apply_bias_tuning(m: Model, train_head: bool = False) -> Model:
    _check_fresh(m)
    keys = [k for k in m.params if k[1] == "bias"]
    if not keys:
        raise AdapterError("model has no bias slots")
    _freeze_backbone(m, train_head)
    for k in keys:
        m.trainable[k] = True
    m.method = "bias"
    return m


def apply_bn_tuning(m: Model, train_head: bool = False) -> Model:
    _check_fresh(m)
    keys = [k for k in m.params if k[1] in ("gamma", "beta")]
    if not keys:
        raise AdapterError("model has no batchnorm layers")
    _freeze_backbone(m, train_head)
    for k in keys:
        m.trainable[k] = True
    m.method = "bn"
    return m


def prepare_full_ft(m: Model) -> Model:
    _check_fresh(m)
    for k in m.params:
        m.trainable[k] = slot_role(k[1]) == "backbone"
    m.method = "full"
    return m


def prepare(m: Model, method: str, rank: int | None = None, **kw) -> Model:
    """Dispatch to one method; ``rank`` is r_T for lora-edge and r for the matrix LoRAs."""
    if method == "lora-edge":
        return attach_lora_edge(m, rank or 2, **kw)
    if method == "lora-c":
        return attach_lora_c(m, rank or 1, **kw)
    if method == "lora-linear":
        return attach_lora_linear(m, rank or 1, **kw)
    if method == "bias":
        return apply_bias_tuning(m, **kw)
    if method == "bn":
        return apply_bn_tuning(m, **kw)
    if method == "full":
        return prepare_full_ft(m)
    raise ValueError(f"unknown method {method!r}; choose from {METHODS}")


def merge_adapters(m: Model, method: str | None = None) -> Model:
    """Fold every (matching) adapter into its host weight and drop the adapter slots."""
    todo = [i for i, a in m.adapters.items() if method is None or a.method == method]
    if not todo:
        raise AdapterError("no unmerged adapters to merge")
    for i in todo:
        a = m.adapters[i]
        if a.merged:
            raise AdapterError(f"adapter on layer {i} already merged")
        m.params[(i, "weight")] = m.params[(i, "weight")] + a.delta(m, i)
        for key in [k for k in m.params if k[0] == i and slot_role(k[1]) == "adapter"]:
            m.remove_slot(key)
        a.merged = True
        del m.adapters[i]
    if not m.adapters:
        m.method = None
        for k in m.params:
            m.trainable[k] = slot_role(k[1]) == "backbone"
    m.version += 1
    return m


def merge_lora_edge(m: Model) -> Model:
    return merge_adapters(m, "lora-edge")


def lora_edge_core_count(c_out: int, r_T: int) -> int:
    return r_T * c_out


def lora_c_count(c_out: int, c_in: int, k: int, r: int, kernel_scaled: bool = True) -> int:
    r_eff = k * r if kernel_scaled else r
    return r_eff * (k * c_out + k * c_in)


def lora_linear_count(M: int, N: int, r: int) -> int:
    return r * (M + N)


@dataclass
class ParamReport:
    method: str | None
    per_layer: list[tuple[int, str, int]]  # (layer, kind, trainable count)
    trainable: int
    full_ft: int

    @property
    def percent(self) -> float:
        return float(f"{100.0 * self.trainable / self.full_ft:.4g}") if self.full_ft else 0.0

    def lines(self) -> list[str]:
        out = [f"layer {i:3d} {kind:16s} {n:10d}" for i, kind, n in self.per_layer if n]
        out.append(f"method: {self.method or 'none'}")
        out.append(f"trainable: {self.trainable}")
        out.append(f"full fine-tuning: {self.full_ft}")
        out.append(f"trainable %: {self.percent}")
        return out


def param_report(m: Model) -> ParamReport:
    per_layer = []
    for i, L in enumerate(m.layers):
        n = sum(v.size for k, v in m.params.items() if k[0] == i and m.trainable[k])
        per_layer.append((i, L.kind, n))
    return ParamReport(
        method=m.method,
        per_layer=per_layer,
        trainable=sum(n for _, _, n in per_layer),
        full_ft=m.count("backbone"),
    )


def tt_shapes(m: Model, i: int) -> list[tuple[int, ...]]:
    a = m.adapters[i]
    return [m.params[(i, s)].shape for s in a.slots]


__all__ = [
    "AdapterError", "AdapterState", "ParamReport", "apply_bias_tuning", "apply_bn_tuning",
    "attach_lora_c", "attach_lora_edge", "attach_lora_linear", "lora_c_count", "lora_edge_core_count",
    "lora_edge_forward", "lora_edge_grad_core1", "lora_linear_count", "merge_adapters", "merge_lora_edge",
    "param_report", "prepare", "prepare_full_ft", "restore_zeroed_cores",
]
