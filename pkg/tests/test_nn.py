import json
from pathlib import Path

import numpy as np
import pytest

from lora_edge import nn
from lora_edge.nn import (
    AdamState, FrozenGradientError, Model, StaleCacheError, adam_step, backward, forward, softmax_cross_entropy,
)
from lora_edge.tensor import ShapeError

from oracles import adam_reference, central_diff, conv_loop, rel_err

DATA = Path(__file__).parent / "data"


def grad_check(m: Model, x, mode="train", seed=0):
    """Max norm-wise relative error between backward() and central differences over trainable slots."""
    rng = np.random.default_rng(seed)
    logits, cache = forward(m, x, mode)
    weights = rng.standard_normal(logits.shape)
    grads = backward(m, cache, weights)
    assert set(grads) == set(m.trainable_keys())

    def f():
        return float((weights * forward(m, x, mode)[0]).sum())

    worst = 0.0
    for key, g in grads.items():
        fd = central_diff(f, m.params[key])
        if np.linalg.norm(g) < 1e-12:
            # analytically zero (a bias feeding batch-stat BN): only FD noise remains
            assert np.linalg.norm(fd) < 1e-7
            continue
        worst = max(worst, rel_err(g, fd))
    return worst


def _model(kind, rng):
    """A tiny model whose trainable slots sit on both sides of the layer under test."""
    if kind == "conv1d":
        layers, shape = [nn.conv1d(2, 3, 3), nn.flatten(), nn.dense(18, 2)], (2, 6)
    elif kind == "conv2d":
        layers, shape = [nn.conv2d(2, 3, 3), nn.flatten(), nn.dense(48, 2)], (2, 4, 4)
    elif kind == "conv2d-strided":
        layers, shape = [nn.conv2d(2, 3, 3, stride=2, padding=0), nn.flatten(), nn.dense(12, 2)], (2, 5, 6)
    elif kind in ("batchnorm-train", "batchnorm-eval"):
        layers, shape = [nn.conv1d(2, 3, 3), nn.batchnorm(3), nn.flatten(), nn.dense(15, 2)], (2, 5)
    elif kind == "relu":
        layers, shape = [nn.conv1d(2, 3, 3), nn.relu(), nn.flatten(), nn.dense(15, 2)], (2, 5)
    elif kind == "maxpool":
        layers, shape = [nn.conv2d(1, 2, 3), nn.maxpool(2, 2), nn.flatten(), nn.dense(8, 2)], (1, 4, 5)
    elif kind == "global-avg-pool":
        layers, shape = [nn.conv1d(2, 3, 3), nn.gap(), nn.dense(3, 2)], (2, 5)
    elif kind == "dense":
        layers, shape = [nn.dense(4, 3), nn.dense(3, 2)], (4,)
    elif kind == "flatten":
        layers, shape = [nn.conv2d(1, 2, 3), nn.flatten(), nn.dense(18, 2)], (1, 3, 3)
    elif kind == "add":
        layers, shape = [nn.conv1d(2, 2, 3), nn.relu(), nn.conv1d(2, 2, 3), nn.add(1), nn.gap(), nn.dense(2, 2)], (2, 5)
    m = Model(layers, shape, seed=int(rng.integers(1 << 30)))
    for k, v in m.params.items():
        if k[1] in ("bias", "beta", "gamma"):
            m.params[k] = v + rng.standard_normal(v.shape) * 0.5
        if k[1] == "running_var":
            m.params[k] = rng.uniform(0.5, 2.0, v.shape)
        if k[1] == "running_mean":
            m.params[k] = rng.standard_normal(v.shape)
    return m, shape


LAYER_CASES = [
    "conv1d", "conv2d", "conv2d-strided", "batchnorm-train", "batchnorm-eval", "relu",
    "maxpool", "global-avg-pool", "dense", "flatten", "add",
]


@pytest.mark.parametrize("kind", LAYER_CASES)
def test_gradients_every_layer_kind(kind):
    worst = 0.0
    for trial in range(20):
        rng = np.random.default_rng(1000 * LAYER_CASES.index(kind) + trial)
        m, shape = _model(kind, rng)
        x = rng.standard_normal((4,) + shape)
        mode = "eval" if kind == "batchnorm-eval" else "train"
        worst = max(worst, grad_check(m, x, mode, seed=trial))
    assert worst <= 1e-5


def test_dense_identity():
    m = Model([nn.dense(3, 3)], (3,))
    m.params[(0, "weight")] = np.eye(3)
    x = np.random.default_rng(0).standard_normal((5, 3))
    assert np.array_equal(forward(m, x)[0], x)


def test_shape_chain_violation():
    with pytest.raises(ShapeError):
        Model([nn.conv1d(3, 4, 3), nn.dense(10, 2)], (3, 8))
    m = Model([nn.dense(3, 2)], (3,))
    with pytest.raises(ShapeError):
        forward(m, np.zeros((2, 4)))


def _oracle_pipeline(m, x):
    """Same toy net evaluated with loop convolutions and plain numpy."""
    P = m.params
    h = conv_loop(P[(0, "weight")], x, 1, 1) + P[(0, "bias")][None, :, None, None]
    h = np.maximum(h, 0)
    h = conv_loop(P[(2, "weight")], h, 1, 1) + P[(2, "bias")][None, :, None, None]
    h = np.maximum(h, 0).mean(axis=(2, 3))
    return h @ P[(5, "weight")].T + P[(5, "bias")]


def _golden_model():
    layers = [nn.conv2d(1, 3, 3), nn.relu(), nn.conv2d(3, 4, 3), nn.relu(), nn.gap(), nn.dense(4, 3)]
    m = Model(layers, (1, 3, 6), seed=7)
    rng = np.random.default_rng(8)
    for k in m.params:
        if k[1] == "bias":
            m.params[k] = rng.standard_normal(m.params[k].shape) * 0.1
    x = np.random.default_rng(9).standard_normal((2, 1, 3, 6))
    return m, x


def test_golden_logits():
    m, x = _golden_model()
    logits = forward(m, x)[0]
    np.testing.assert_allclose(logits, _oracle_pipeline(m, x), atol=1e-12, rtol=0)
    golden = np.array(json.loads((DATA / "golden_logits.json").read_text())["logits"])
    np.testing.assert_allclose(logits, golden, atol=1e-12, rtol=0)


def test_forward_deterministic():
    m1 = nn.build_backbone("tresnet-toy", 3, 16, 4, seed=3)
    m2 = nn.build_backbone("tresnet-toy", 3, 16, 4, seed=3)
    x = np.random.default_rng(0).standard_normal((5, 1, 3, 16))
    assert np.array_equal(forward(m1, x)[0], forward(m2, x)[0])


def test_bn_eval_does_not_mutate_running_stats():
    m = nn.build_backbone("calanet-toy", 3, 16, 4)
    before = {k: v.copy() for k, v in m.params.items()}
    forward(m, np.random.default_rng(0).standard_normal((6, 3, 16)), "eval")
    assert all(np.array_equal(before[k], m.params[k]) for k in before)
    forward(m, np.random.default_rng(0).standard_normal((6, 3, 16)), "train")
    assert not np.array_equal(before[(1, "running_mean")], m.params[(1, "running_mean")])


def test_bn_running_stats_use_unbiased_variance():
    m = Model([nn.batchnorm(2)], (2, 3))
    x = np.random.default_rng(0).standard_normal((4, 2, 3))
    forward(m, x, "train")
    var = x.transpose(1, 0, 2).reshape(2, -1).var(axis=1, ddof=1)
    np.testing.assert_allclose(m.params[(0, "running_var")], 0.9 + 0.1 * var)


def test_backward_all_frozen():
    m = nn.build_backbone("calanet-toy", 3, 16, 4)
    m.freeze_all()
    logits, cache = forward(m, np.zeros((2, 3, 16)), "train")
    assert backward(m, cache, np.ones_like(logits)) == {}


def test_backward_constant_input_loss():
    m = Model([nn.dense(3, 2)], (3,))
    x = np.random.default_rng(0).standard_normal((4, 3))
    logits, cache = forward(m, x)
    grads = backward(m, cache, np.zeros_like(logits))
    assert all(not g.any() for g in grads.values())


def test_backward_stale_cache():
    m = Model([nn.dense(3, 2)], (3,))
    logits, cache = forward(m, np.ones((1, 3)))
    g = backward(m, cache, np.ones_like(logits))
    adam_step(m, g, AdamState(), 0.1)
    with pytest.raises(StaleCacheError):
        backward(m, cache, np.ones_like(logits))


def test_cross_entropy_uniform():
    loss, _ = softmax_cross_entropy(np.zeros((3, 5)), np.array([0, 2, 4]))
    assert loss == pytest.approx(np.log(5))


def test_cross_entropy_confident():
    logits = np.array([[100.0, 0.0, 0.0]])
    loss, _ = softmax_cross_entropy(logits, np.array([0]))
    assert loss < 1e-40


def test_cross_entropy_gradient():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((4, 3))
    labels = np.array([0, 2, 1, 2])
    _, g = softmax_cross_entropy(logits, labels)
    fd = central_diff(lambda: softmax_cross_entropy(logits, labels)[0], logits)
    assert rel_err(g, fd) <= 1e-6


def test_cross_entropy_label_range():
    with pytest.raises(ValueError):
        softmax_cross_entropy(np.zeros((1, 3)), np.array([3]))


def test_adam_zero_gradient():
    m = Model([nn.dense(2, 2)], (2,))
    before = {k: v.copy() for k, v in m.params.items()}
    state = adam_step(m, {k: np.zeros_like(v) for k, v in m.params.items()}, AdamState(), 0.01)
    assert state.step == 1
    assert all(np.array_equal(before[k], m.params[k]) for k in before)


def test_adam_matches_reference():
    m = Model([nn.dense(1, 1, bias=False)], (1,))
    m.params[(0, "weight")] = np.array([[0.5]])
    gs = [0.3, 0.3, -1.2, 0.05, 2.0]
    ref = adam_reference(0.5, gs, 0.01)
    state = AdamState()
    for g, expect in zip(gs, ref):
        adam_step(m, {(0, "weight"): np.array([[g]])}, state, 0.01)
        assert m.params[(0, "weight")].item() == pytest.approx(expect, abs=1e-15)
    # first step moves by about -lr * sign(g)
    assert ref[0] == pytest.approx(0.5 - 0.01, abs=1e-9)


def test_adam_rejects_frozen_gradient():
    m = Model([nn.dense(2, 2)], (2,))
    m.set_trainable((0, "bias"), False)
    grads = {k: np.ones_like(v) for k, v in m.params.items()}
    with pytest.raises(FrozenGradientError):
        adam_step(m, grads, AdamState(), 0.01)


def test_freeze_mask_law():
    m = nn.build_backbone("calanet-toy", 3, 16, 4)
    for k in list(m.trainable):
        if k[1] == "weight":
            m.set_trainable(k, False)
    frozen = {k: m.params[k].copy() for k, t in m.trainable.items() if not t and not k[1].startswith("running")}
    rng = np.random.default_rng(0)
    state = AdamState()
    for _ in range(5):
        x = rng.standard_normal((8, 3, 16))
        logits, cache = forward(m, x, "train")
        _, g = softmax_cross_entropy(logits, rng.integers(0, 4, 8))
        adam_step(m, backward(m, cache, g), state, 0.05)
    assert all(np.array_equal(v, m.params[k]) for k, v in frozen.items())


def test_running_stats_cannot_be_trainable():
    m = nn.build_backbone("calanet-toy", 3, 16, 4)
    with pytest.raises(ValueError):
        m.set_trainable((1, "running_mean"))


def test_backbone_bn_widths():
    m = nn.build_backbone("calanet-toy", 3, 32, 4)
    widths = [L.in_channels for L in m.layers if L.kind == "batchnorm"]
    assert widths == [8, 16, 32]


@pytest.mark.parametrize("name", sorted(nn.BACKBONES))
def test_backbones_build_and_run(name):
    m = nn.build_backbone(name, 3, 32, 5)
    x = np.random.default_rng(0).standard_normal((2,) + m.input_shape)
    assert forward(m, x)[0].shape == (2, 5)


def test_unknown_backbone():
    with pytest.raises(ValueError):
        nn.build_backbone("resnet-50", 3, 32, 4)
