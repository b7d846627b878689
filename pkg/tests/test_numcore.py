import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slmkit.errors import InvalidStateError
from slmkit.numcore import (OptimizerState, Parameter, Tensor, adamw_step, concat, conv1d,
                            embedding, gather_rows, gelu, gradient_check, layer_norm, linear,
                            lr_at, matmul, softmax, softmax_cross_entropy, stack)


def sliding_conv(x, k, stride):
    """Direct same-padded cross-correlation, one output at a time."""
    T, c_in = x.shape
    K, _, c_out = k.shape
    pad = (K - 1) // 2
    out = []
    for t in range(0, T, stride):
        acc = np.zeros(c_out)
        for j in range(K):
            src = t + j - pad
            if 0 <= src < T:
                acc += x[src] @ k[j]
        out.append(acc)
    return np.array(out)


# -- conv1d --------------------------------------------------------------------

def test_conv1d_box_kernel():
    out = conv1d(np.array([[1.0], [2.0], [3.0], [4.0]]), np.ones((3, 1, 1)), stride=1)
    np.testing.assert_array_equal(out.data[:, 0], [3, 6, 9, 7])


def test_conv1d_identity_kernel(rng):
    x = rng.normal(size=(9, 1))
    k = np.array([0.0, 1.0, 0.0]).reshape(3, 1, 1)
    np.testing.assert_array_equal(conv1d(x, k).data, x)


def test_conv1d_stride_two_length():
    assert conv1d(np.zeros((10, 2)), np.zeros((3, 2, 4)), stride=2).shape == (5, 4)


@pytest.mark.parametrize("stride", [1, 2, 3])
@pytest.mark.parametrize("T", list(range(1, 65)))
def test_conv1d_length_is_ceil(T, stride):
    out = conv1d(np.zeros((T, 1)), np.zeros((3, 1, 1)), stride)
    assert out.shape[0] == math.ceil(T / stride)


@settings(max_examples=40, deadline=None)
@given(T=st.integers(1, 20), stride=st.integers(1, 3), K=st.sampled_from([1, 3, 5]),
       seed=st.integers(0, 2**31))
def test_conv1d_matches_sliding_window(T, stride, K, seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(T, 3))
    k = r.normal(size=(K, 3, 2))
    np.testing.assert_allclose(conv1d(x, k, stride).data, sliding_conv(x, k, stride), atol=1e-12)


def test_conv1d_batched_equals_unbatched(rng):
    x = rng.normal(size=(2, 7, 3))
    k = rng.normal(size=(3, 3, 4))
    batched = conv1d(x, k, 2).data
    for b in range(2):
        np.testing.assert_allclose(batched[b], conv1d(x[b], k, 2).data, atol=1e-12)


def test_conv1d_channel_mismatch():
    with pytest.raises(ValueError):
        conv1d(np.zeros((4, 2)), np.zeros((3, 3, 1)))


def test_conv1d_even_kernel_rejected():
    with pytest.raises(ValueError):
        conv1d(np.zeros((4, 2)), np.zeros((2, 2, 1)))


# -- layer_norm ----------------------------------------------------------------

def test_layer_norm_constant_frame():
    out = layer_norm(np.full((1, 3), 5.0), np.ones(3), np.zeros(3))
    np.testing.assert_array_equal(out.data, np.zeros((1, 3)))


def test_layer_norm_reference_values():
    out = layer_norm(np.array([[1.0, 2.0, 3.0]]), np.ones(3), np.zeros(3), eps=1e-12)
    # population std of [1,2,3] is sqrt(2/3)
    np.testing.assert_allclose(out.data[0], [-1.224744871391589, 0.0, 1.224744871391589], atol=1e-9)


def test_layer_norm_zero_gain(rng):
    bias = rng.normal(size=4)
    out = layer_norm(rng.normal(size=(5, 4)), np.zeros(4), bias)
    np.testing.assert_array_equal(out.data, np.broadcast_to(bias, (5, 4)))


def test_layer_norm_moments(rng):
    out = layer_norm(rng.normal(3.0, 2.0, size=(6, 16)), np.ones(16), np.zeros(16), eps=1e-12).data
    np.testing.assert_allclose(out.mean(-1), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(-1), 1, atol=1e-9)


# -- cross entropy -------------------------------------------------------------

def test_cross_entropy_uniform():
    loss = softmax_cross_entropy(np.zeros((3, 4)), [0, 1, 2], [True] * 3)
    assert loss.item() == pytest.approx(math.log(4), abs=1e-12)


def test_cross_entropy_confident():
    logits = np.zeros((1, 5))
    logits[0, 2] = 1e3
    assert softmax_cross_entropy(logits, [2], [True]).item() < 1e-12


def test_cross_entropy_two_logits():
    loss = softmax_cross_entropy(np.array([[1.0, 2.0]]), [1], [True])
    assert loss.item() == pytest.approx(math.log1p(math.exp(-1)), abs=1e-12)
    assert loss.item() == pytest.approx(0.31326168751822286, abs=1e-12)


def test_cross_entropy_ignores_unmasked(rng):
    logits = rng.normal(size=(4, 6))
    full = softmax_cross_entropy(logits[:2], [1, 2]).item()
    partial = softmax_cross_entropy(logits, [1, 2, 0, 0], [True, True, False, False]).item()
    assert full == pytest.approx(partial, abs=1e-14)


def test_cross_entropy_empty_mask():
    with pytest.raises(ValueError):
        softmax_cross_entropy(np.zeros((2, 3)), [0, 1], [False, False])


# -- gradients -----------------------------------------------------------------

def _check(fn, params, tol=1e-4):
    report = gradient_check(fn, params, eps=1e-6, tol=tol)
    assert report.passed, report.failures
    return report


def test_gradient_check_square():
    w = Parameter(np.array([3.0]), "w")
    report = gradient_check(lambda: (w * w).sum(), {"w": w}, eps=1e-5)
    np.testing.assert_allclose(w.grad, [6.0], atol=1e-8)
    assert report.max_rel_error["w"] < 1e-8


def test_gradient_check_skips_frozen():
    w = Parameter(np.array([1.0, 2.0]), "w")
    f = Parameter(np.array([0.5, 0.5]), "f", trainable=False)
    report = gradient_check(lambda: (w * f).sum(), {"w": w, "f": f})
    assert set(report.max_rel_error) == {"w"}


def test_gradient_check_flags_wrong_gradient():
    from slmkit.numcore.tensor import make_node
    w = Parameter(np.array([1.5]), "w")

    def bad_square(x):
        return make_node(x.data ** 2, (x,), lambda g, need: (g * x.data,))

    report = gradient_check(lambda: bad_square(w).sum(), {"w": w})
    assert not report.passed


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), T=st.integers(1, 9), stride=st.integers(1, 3))
def test_conv_and_layer_norm_gradients(seed, T, stride):
    r = np.random.default_rng(seed)
    x = Parameter(r.normal(size=(T, 3)), "x")
    k = Parameter(r.normal(size=(3, 3, 4)), "k")
    gain = Parameter(r.normal(size=4), "gain")
    bias = Parameter(r.normal(size=4), "bias")
    proj = r.normal(size=(T + 2, 4))

    def fn():
        h = layer_norm(conv1d(x, k, stride), gain, bias)
        return (h * proj[: h.shape[0]]).sum()

    _check(fn, {"x": x, "k": k, "gain": gain, "bias": bias})


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_attention_composition_gradients(seed):
    r = np.random.default_rng(seed)
    q = Parameter(r.normal(size=(2, 3, 4)), "q")
    k = Parameter(r.normal(size=(2, 5, 4)), "k")
    v = Parameter(r.normal(size=(2, 5, 4)), "v")
    mask = np.where(r.random((2, 1, 5)) < 0.3, -1e9, 0.0)
    mask[..., 0] = 0.0
    proj = r.normal(size=(2, 3, 4))

    def fn():
        a = softmax(matmul(q, k.transpose(0, 2, 1)) * 0.5 + mask)
        return (gelu(matmul(a, v)) * proj).sum()

    _check(fn, {"q": q, "k": k, "v": v})


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_embedding_linear_ce_gradients(seed):
    r = np.random.default_rng(seed)
    table = Parameter(r.normal(size=(7, 5)), "table")
    w = Parameter(r.normal(size=(7, 5)), "w")
    b = Parameter(r.normal(size=7), "b")
    ids = r.integers(0, 7, size=(2, 4))
    targets = r.integers(0, 7, size=(2, 4))
    mask = r.random((2, 4)) < 0.7
    mask[0, 0] = True

    def fn():
        return softmax_cross_entropy(linear(embedding(table, ids), w, b), targets, mask)

    _check(fn, {"table": table, "w": w, "b": b})


def test_concat_stack_gather_gradients(rng):
    a = Parameter(rng.normal(size=(2, 3, 4)), "a")
    b = Parameter(rng.normal(size=(2, 2, 4)), "b")
    c = Parameter(rng.normal(size=(2, 5, 4)), "c")
    idx = np.array([[4, 0, 1, 1], [2, 3, 0, 4]])
    proj = rng.normal(size=(2, 2, 4, 4))

    def fn():
        joined = concat([a, b], axis=1)
        both = stack([gather_rows(joined, idx), gather_rows(c, idx)], axis=1)
        return (both * proj).sum() + (a[:, 1:] * a[:, 1:]).sum()

    _check(fn, {"a": a, "b": b, "c": c})


def test_grad_accumulates_across_paths():
    w = Parameter(np.array([2.0]), "w")
    ((w * w) + (w * 3.0)).sum().backward()
    np.testing.assert_allclose(w.grad, [7.0])


def test_values_stay_finite(rng):
    logits = Parameter(rng.normal(size=(4, 6)) * 50, "logits")
    loss = softmax_cross_entropy(softmax(logits) * 1e4, [0, 1, 2, 3])
    loss.backward()
    assert np.isfinite(loss.data) and np.all(np.isfinite(logits.grad))


# -- optimizer -----------------------------------------------------------------

def test_lr_schedule_points():
    assert lr_at(100, 1e-3, 100) == pytest.approx(1e-3)
    assert lr_at(400, 1e-3, 100) == pytest.approx(5e-4)
    assert lr_at(50, 1e-3, 100) == pytest.approx(5e-4)


def test_lr_schedule_shape():
    lrs = [lr_at(s, 1.0, 50) for s in range(1, 400)]
    peak = int(np.argmax(lrs)) + 1
    assert peak == 50
    assert all(a < b for a, b in zip(lrs[:49], lrs[1:50]))
    assert all(a > b for a, b in zip(lrs[49:], lrs[50:]))
    assert abs(lr_at(50, 1.0, 50) - lr_at(51, 1.0, 50)) < 0.02


def test_adamw_zero_grad_no_decay():
    w = Parameter(np.array([1.0, -2.0]), "w")
    w.grad = np.zeros(2)
    adamw_step(OptimizerState(peak_lr=0.1, warmup_steps=1, weight_decay=0.0), {"w": w})
    np.testing.assert_array_equal(w.data, [1.0, -2.0])


def test_adamw_decoupled_decay():
    w = Parameter(np.array([1.0, -2.0]), "w")
    w.grad = np.zeros(2)
    state = OptimizerState(peak_lr=0.1, warmup_steps=1, weight_decay=0.01)
    lr = adamw_step(state, {"w": w})
    np.testing.assert_allclose(w.data, np.array([1.0, -2.0]) * (1 - lr * 0.01), rtol=1e-15)


def test_adamw_converges_on_quadratic():
    w = Parameter(np.array([5.0]), "w")
    state = OptimizerState(peak_lr=0.05, warmup_steps=10, weight_decay=0.0)
    for _ in range(2000):
        w.grad = None
        ((w - 1.0) * (w - 1.0)).sum().backward()
        adamw_step(state, {"w": w})
    assert abs(w.data[0] - 1.0) < 1e-3


def test_adamw_leaves_frozen_bits(rng):
    w = Parameter(rng.normal(size=3), "w")
    f = Parameter(rng.normal(size=3), "f", trainable=False)
    before = f.data.tobytes()
    state = OptimizerState(peak_lr=0.1, warmup_steps=1)
    for _ in range(5):
        w.grad = f.grad = None
        (w * f).sum().backward()
        adamw_step(state, {"w": w, "f": f})
    assert f.data.tobytes() == before
    assert set(state.m) == {"w"}
    assert state.step == 5


def test_adamw_missing_gradient():
    w = Parameter(np.ones(2), "w")
    with pytest.raises(InvalidStateError):
        adamw_step(OptimizerState(peak_lr=0.1, warmup_steps=1), {"w": w})
