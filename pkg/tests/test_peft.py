import numpy as np
import pytest

from lora_edge import nn, peft
from lora_edge.nn import AdamState, Model, adam_step, backward, forward, softmax_cross_entropy
from lora_edge.peft import (
    AdapterError, attach_lora_c, attach_lora_edge, attach_lora_linear, lora_c_count, lora_edge_core_count,
    lora_edge_forward, lora_edge_grad_core1, lora_linear_count, merge_adapters, merge_lora_edge, param_report,
    prepare, restore_zeroed_cores,
)
from lora_edge.tensor import conv_forward
from lora_edge.tt import tt_svd

from oracles import central_diff, conv_loop, rel_err, tt_from_cores


def single_conv(cout=8, cin=4, k=3, length=6, seed=0):
    return Model([nn.conv2d(cin, cout, k, bias=False), nn.gap(), nn.dense(cout, 3)], (cin, length, length), seed=seed)


def single_conv1d(cout=6, cin=4, k=3, seed=0):
    return Model([nn.conv1d(cin, cout, k), nn.gap(), nn.dense(cout, 3)], (cin, 10), seed=seed)


def train_steps(m, x, y, steps, lr=0.05):
    state = AdamState()
    for _ in range(steps):
        logits, cache = forward(m, x)
        _, g = softmax_cross_entropy(logits, y)
        adam_step(m, backward(m, cache, g), state, lr)


# --- attach -----------------------------------------------------------------

def test_attach_core_shapes_and_count():
    m = attach_lora_edge(single_conv(), 2)
    assert peft.tt_shapes(m, 0) == [(1, 8, 2), (2, 4, 2), (2, 3, 2), (2, 3, 1)]
    assert m.count("adapter", trainable_only=True) == 16
    assert param_report(m).trainable == 16


def test_attach_conv1d_has_three_cores():
    m = attach_lora_edge(single_conv1d(), 2)
    assert peft.tt_shapes(m, 0) == [(1, 6, 2), (2, 4, 2), (2, 3, 1)]


def test_attach_freezes_everything_else():
    m = attach_lora_edge(single_conv(), 2)
    assert set(m.trainable_keys()) == {(0, "tt_core_1")}
    m = attach_lora_edge(single_conv(), 2, train_head=True)
    assert set(m.trainable_keys()) == {(0, "tt_core_1"), (2, "weight"), (2, "bias")}


def test_attach_core1_zero_rest_are_tt_svd():
    m = single_conv()
    w = m.params[(0, "weight")].copy()
    ref = tt_svd(w, 2).cores
    attach_lora_edge(m, 2)
    assert not m.params[(0, "tt_core_1")].any()
    assert np.array_equal(m.params[(0, "tt_init_1")], ref[0])
    for k in (2, 3, 4):
        assert np.array_equal(m.params[(0, f"tt_core_{k}")], ref[k - 1])


def test_attach_trainable_core_four():
    m = attach_lora_edge(single_conv(), 2, trainable_cores={4}, zero_init={4})
    assert m.trainable_keys() == [(0, "tt_core_4")]
    assert not m.params[(0, "tt_core_4")].any()
    assert m.params[(0, "tt_core_1")].any()


def test_attach_errors():
    m = attach_lora_edge(single_conv(), 2)
    with pytest.raises(AdapterError):
        attach_lora_edge(m, 2)
    with pytest.raises(ValueError):
        attach_lora_edge(single_conv(), 0)
    with pytest.raises(AdapterError):
        attach_lora_edge(Model([nn.dense(3, 2)], (3,)), 2)
    with pytest.raises(ValueError):
        attach_lora_edge(single_conv1d(), 2, trainable_cores={4})


@pytest.mark.parametrize("name", sorted(nn.BACKBONES))
def test_zero_start_bitwise(name):
    m = nn.build_backbone(name, 3, 16, 4, seed=2)
    x = np.random.default_rng(0).standard_normal((20,) + m.input_shape)
    before = forward(m, x)[0]
    attach_lora_edge(m, 2)
    assert np.array_equal(forward(m, x)[0], before)


# --- forward / grad ---------------------------------------------------------

def test_forward_zero_core_equals_base():
    m = attach_lora_edge(single_conv(), 2)
    x = np.random.default_rng(1).standard_normal((2, 4, 6, 6))
    assert np.array_equal(lora_edge_forward(m, 0, x), conv_forward(m.params[(0, "weight")], x, 1, 1))


def test_forward_doubles_when_restored():
    rng = np.random.default_rng(3)
    cores = [rng.standard_normal(s) for s in [(1, 8, 2), (2, 4, 2), (2, 3, 2), (2, 3, 1)]]
    m = single_conv()
    m.params[(0, "weight")] = tt_from_cores(cores)
    attach_lora_edge(m, 2)
    restore_zeroed_cores(m)
    x = rng.standard_normal((2, 4, 6, 6))
    base = conv_forward(m.params[(0, "weight")], x, 1, 1)
    np.testing.assert_allclose(lora_edge_forward(m, 0, x), 2 * base, atol=1e-9 * np.abs(base).max())


def test_forward_random_cores_matches_oracle():
    rng = np.random.default_rng(4)
    m = attach_lora_edge(single_conv(), 2)
    for k in range(1, 5):
        m.params[(0, f"tt_core_{k}")] = rng.standard_normal(m.params[(0, f"tt_core_{k}")].shape)
    x = rng.standard_normal((2, 4, 6, 6))
    dw = tt_from_cores([m.params[(0, f"tt_core_{k}")] for k in range(1, 5)])
    expect = conv_loop(m.params[(0, "weight")] + dw, x, 1, 1)
    np.testing.assert_allclose(lora_edge_forward(m, 0, x), expect, atol=1e-10)


def test_forward_rejects_merged():
    m = attach_lora_edge(single_conv(), 2)
    a = m.adapters[0]
    merge_lora_edge(m)
    with pytest.raises(AdapterError):
        lora_edge_forward(m, 0, np.zeros((1, 4, 6, 6)))
    with pytest.raises(AdapterError):
        a.delta(m, 0)


def test_grad_core1_zero_out():
    m = attach_lora_edge(single_conv(), 2)
    x = np.random.default_rng(0).standard_normal((2, 4, 6, 6))
    g = lora_edge_grad_core1(m, 0, x, np.zeros((2, 8, 6, 6)))
    assert g.shape == (1, 8, 2) and not g.any()


def _core1_fd(m, layer, x, go):
    def f():
        return float((go * lora_edge_forward(m, layer, x)).sum())
    return central_diff(f, m.params[(layer, "tt_core_1")])


@pytest.mark.parametrize("dims", ["2d", "1d"])
def test_grad_core1_finite_differences(dims):
    worst = 0.0
    for trial in range(20):
        rng = np.random.default_rng(trial)
        if dims == "2d":
            m = attach_lora_edge(single_conv(seed=trial), 2)
            x = rng.standard_normal((2, 4, 6, 6))
        else:
            m = attach_lora_edge(single_conv1d(seed=trial), 2)
            x = rng.standard_normal((2, 4, 10))
        m.params[(0, "tt_core_1")] = rng.standard_normal(m.params[(0, "tt_core_1")].shape)
        go = rng.standard_normal(lora_edge_forward(m, 0, x).shape)
        g = lora_edge_grad_core1(m, 0, x, go)
        worst = max(worst, rel_err(g, _core1_fd(m, 0, x, go)))
    assert worst <= 1e-5


def test_grad_core1_invariant_to_core1_values():
    rng = np.random.default_rng(5)
    m = attach_lora_edge(single_conv(), 2)
    x, go = rng.standard_normal((2, 4, 6, 6)), rng.standard_normal((2, 8, 6, 6))
    g0 = lora_edge_grad_core1(m, 0, x, go)
    m.params[(0, "tt_core_1")] = rng.standard_normal((1, 8, 2))
    np.testing.assert_allclose(lora_edge_grad_core1(m, 0, x, go), g0, atol=1e-12)


def test_model_backward_core1_matches_fd():
    rng = np.random.default_rng(6)
    m = attach_lora_edge(nn.build_backbone("tresnet-toy", 3, 8, 3, seed=1), 2)
    for i in m.adapters:
        m.params[(i, "tt_core_1")] = rng.standard_normal(m.params[(i, "tt_core_1")].shape) * 0.1
    x = rng.standard_normal((3,) + m.input_shape)
    logits, cache = forward(m, x)
    wts = rng.standard_normal(logits.shape)
    grads = backward(m, cache, wts)
    f = lambda: float((wts * forward(m, x)[0]).sum())
    for key, g in grads.items():
        assert rel_err(g, central_diff(f, m.params[key])) <= 1e-5


# --- merge ------------------------------------------------------------------

def test_merge_immediately_is_bitwise_noop():
    m = nn.build_backbone("tresnet-toy", 3, 16, 4)
    w0 = {k: v.copy() for k, v in m.params.items()}
    merge_lora_edge(attach_lora_edge(m, 2))
    assert set(m.params) == set(w0)
    assert all(np.array_equal(m.params[k], w0[k]) for k in w0)


@pytest.mark.parametrize("name", sorted(nn.BACKBONES))
def test_merge_equivalence_after_training(name):
    rng = np.random.default_rng(7)
    m = attach_lora_edge(nn.build_backbone(name, 3, 16, 4, seed=3), 2)
    x = rng.standard_normal((32,) + m.input_shape)
    train_steps(m, x, rng.integers(0, 4, 32), 10)
    probe = rng.standard_normal((100,) + m.input_shape)
    two_path = forward(m, probe)[0]
    merged = merge_lora_edge(m.copy())
    assert np.abs(forward(merged, probe)[0] - two_path).max() <= 1e-9


def test_merge_equivalence_random_cores():
    rng = np.random.default_rng(8)
    m = attach_lora_edge(nn.build_backbone("mobilenet-toy", 3, 16, 4), 2)
    for key in [k for k in m.params if k[1].startswith("tt_core")]:
        m.params[key] = rng.standard_normal(m.params[key].shape) * 0.3
    probe = rng.standard_normal((100,) + m.input_shape)
    two_path = forward(m, probe)[0]
    assert np.abs(forward(merge_lora_edge(m), probe)[0] - two_path).max() <= 1e-9


def test_double_merge_raises():
    m = merge_lora_edge(attach_lora_edge(single_conv(), 2))
    with pytest.raises(AdapterError):
        merge_lora_edge(m)


def test_merged_model_preserves_inference_cost():
    base = nn.build_backbone("tresnet-toy", 3, 16, 4)
    m = merge_lora_edge(attach_lora_edge(base.copy(), 2))
    assert m.layers == base.layers
    assert {k: v.shape for k, v in m.params.items()} == {k: v.shape for k, v in base.params.items()}
    assert m.flop_count() == base.flop_count()
    assert m.method is None and not m.adapters


def test_frozen_cores_unchanged_by_training():
    rng = np.random.default_rng(9)
    m = attach_lora_edge(nn.build_backbone("calanet-toy", 3, 16, 4), 2)
    snap = {k: v.copy() for k, v in m.params.items()}
    x = rng.standard_normal((16, 3, 16))
    train_steps(m, x, rng.integers(0, 4, 16), 5)
    changed = {k for k in snap if not np.array_equal(snap[k], m.params[k])}
    assert changed and all(k[1] == "tt_core_1" for k in changed)


# --- LoRA-C / linear --------------------------------------------------------

def test_lora_c_count_small():
    m = attach_lora_c(single_conv(), 1)
    assert m.params[(0, "lora_A")].shape == (3, 12)
    assert m.params[(0, "lora_B")].shape == (24, 3)
    assert param_report(m).trainable == 108 == lora_c_count(8, 4, 3, 1)


def test_lora_c_count_unscaled_rank():
    m = attach_lora_c(single_conv(64, 64, 3, length=4), 1, kernel_scaled=False)
    assert param_report(m).trainable == 384 == lora_c_count(64, 64, 3, 1, kernel_scaled=False)


def test_lora_c_rejects_conv1d():
    with pytest.raises(AdapterError):
        attach_lora_c(single_conv1d(), 1)


def test_lora_c_b_zero_preserves_logits():
    m = nn.build_backbone("tresnet-toy", 3, 16, 4)
    x = np.random.default_rng(0).standard_normal((10,) + m.input_shape)
    before = forward(m, x)[0]
    attach_lora_c(m, 1, sigma2=0.5)
    assert not m.params[(0, "lora_B")].any()
    assert np.array_equal(forward(m, x)[0], before)


def test_lora_c_delta_is_row_major_reshape():
    rng = np.random.default_rng(1)
    m = attach_lora_c(single_conv(), 1)
    m.params[(0, "lora_B")] = rng.standard_normal((24, 3))
    a, b = m.params[(0, "lora_A")], m.params[(0, "lora_B")]
    dw = m.adapters[0].delta(m, 0)
    flat = b @ a
    assert dw[5, 2, 1, 0] == flat.ravel()[np.ravel_multi_index((5, 2, 1, 0), (8, 4, 3, 3))]


def test_lora_c_init_variance():
    m = attach_lora_c(single_conv(64, 64, 3, length=4), 4, sigma2=1e-2, seed=3)
    a = m.params[(0, "lora_A")]
    assert abs(a.var() - 1e-2) < 2e-3 and abs(a.mean()) < 5e-3


@pytest.mark.parametrize("method", ["lora-c", "lora-linear"])
def test_matrix_lora_gradients(method):
    worst = 0.0
    for trial in range(20):
        rng = np.random.default_rng(trial)
        m = single_conv(seed=trial)
        if method == "lora-c":
            attach_lora_c(m, 1, sigma2=0.1, seed=trial)
        else:
            attach_lora_linear(m, 2, sigma2=0.1, seed=trial)
        for key in m.trainable_keys():
            m.params[key] = rng.standard_normal(m.params[key].shape) * 0.3
        x = rng.standard_normal((2, 4, 6, 6))
        logits, cache = forward(m, x)
        wts = rng.standard_normal(logits.shape)
        grads = backward(m, cache, wts)
        assert set(grads) == set(m.trainable_keys())
        f = lambda: float((wts * forward(m, x)[0]).sum())
        for key, g in grads.items():
            worst = max(worst, rel_err(g, central_diff(f, m.params[key])))
    assert worst <= 1e-5


def test_lora_linear_count_and_merge():
    rng = np.random.default_rng(2)
    m = attach_lora_linear(single_conv(), 2)
    assert param_report(m).trainable == lora_linear_count(3, 8, 2) == 22
    m.params[(2, "lora_B")] = rng.standard_normal((3, 2))
    x = rng.standard_normal((5, 4, 6, 6))
    two_path = forward(m, x)[0]
    merge_adapters(m)
    assert np.abs(forward(m, x)[0] - two_path).max() <= 1e-12


# --- bias / BN / report -----------------------------------------------------

def test_bias_tuning_count():
    m = nn.build_backbone("calanet-toy", 3, 16, 4)
    expect = sum(v.size for k, v in m.params.items() if k[1] == "bias")
    prepare(m, "bias")
    assert param_report(m).trainable == expect
    assert all(k[1] == "bias" for k in m.trainable_keys())


def test_bn_tuning_count_and_running_stats():
    m = prepare(nn.build_backbone("calanet-toy", 3, 16, 4), "bn")
    assert param_report(m).trainable == 2 * (8 + 16 + 32) == 112
    assert not any(k[1].startswith("running") for k in m.trainable_keys())


def test_bias_bn_errors():
    with pytest.raises(AdapterError):
        prepare(single_conv(), "bn")
    with pytest.raises(AdapterError):
        prepare(Model([nn.conv1d(2, 2, 3, bias=False)], (2, 5)), "bias")


def test_param_report_64_channel_layer():
    m = Model([nn.conv2d(64, 64, 3, bias=False)], (64, 4, 4))
    full = param_report(m)
    assert full.full_ft == 36864
    attach_lora_edge(m, 2)
    rep = param_report(m)
    assert rep.trainable == 128 == lora_edge_core_count(64, 2)
    assert rep.percent == pytest.approx(0.347, abs=0.001)
    assert rep.percent == 0.3472


def test_param_report_full_ft():
    m = prepare(nn.build_backbone("tresnet-toy", 3, 16, 4), "full")
    assert param_report(m).percent == 100.0


def test_lora_edge_fraction_below_lora_c():
    a = attach_lora_edge(nn.build_backbone("tresnet-toy", 3, 16, 4), 2)
    b = attach_lora_c(nn.build_backbone("tresnet-toy", 3, 16, 4), 1)
    c = attach_lora_c(nn.build_backbone("tresnet-toy", 3, 16, 4), 1, kernel_scaled=False)
    assert param_report(a).percent < param_report(c).percent < param_report(b).percent


def test_prepare_unknown():
    with pytest.raises(ValueError):
        prepare(single_conv(), "adapters")
