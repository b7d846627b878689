"""Differentiable operations over :class:`Tensor`.

The set is closed: exactly what the audio encoder, downsampler and the
encoder-decoder LM need. Every op accepts plain arrays or python scalars in
place of tensors; those are treated as constants.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import Tensor, make_node


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)

    def backward(g, need):
        return (_unbroadcast(g, a.shape) if need[0] else None,
                _unbroadcast(g, b.shape) if need[1] else None)

    return make_node(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)

    def backward(g, need):
        return (_unbroadcast(g, a.shape) if need[0] else None,
                _unbroadcast(-g, b.shape) if need[1] else None)

    return make_node(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)

    def backward(g, need):
        return (_unbroadcast(g * b.data, a.shape) if need[0] else None,
                _unbroadcast(g * a.data, b.shape) if need[1] else None)

    return make_node(a.data * b.data, (a, b), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU (smooth, so finite differences behave)."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    th = np.tanh(inner)
    out = 0.5 * xd * (1.0 + th)

    def backward(g, need):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th ** 2) * dinner),)

    return make_node(out, (x,), backward)


# -- shape ---------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape

    def backward(g, need):
        return (g.reshape(src),)

    return make_node(x.data.reshape(shape), (x,), backward)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))

    def backward(g, need):
        return (g.transpose(inv),)

    return make_node(x.data.transpose(axes), (x,), backward)


def getitem(x: Tensor, index) -> Tensor:
    def backward(g, need):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return make_node(x.data[index], (x,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [_t(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g, need):
        out = []
        for i, flag in enumerate(need):
            if not flag:
                out.append(None)
                continue
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(sl)])
        return out

    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [_t(t) for t in tensors]

    def backward(g, need):
        parts = np.moveaxis(g, axis, 0)
        return [parts[i] if flag else None for i, flag in enumerate(need)]

    return make_node(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


# -- reductions ----------------------------------------------------------------

def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    src = x.shape

    def backward(g, need):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return make_node(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / count)


# -- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product; both operands must be at least 2-D."""
    a, b = _t(a), _t(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")

    def backward(g, need):
        ga = gb = None
        if need[0]:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if need[1]:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return make_node(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias=None) -> Tensor:
    """``x @ weight.T (+ bias)`` with weight stored as [out, in]."""
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
        parents = (x, weight, bias)
    else:
        parents = (x, weight)

    def backward(g, need):
        gx = g @ wd if need[0] else None
        gw = None
        if need[1]:
            gw = g.reshape(-1, g.shape[-1]).T @ xd.reshape(-1, xd.shape[-1])
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.reshape(-1, g.shape[-1]).sum(axis=0) if need[2] else None)
        return grads

    return make_node(out, parents, backward)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"token id out of range [0, {table.shape[0]})")

    def backward(g, need):
        out = np.zeros_like(table.data)
        np.add.at(out, ids, g)
        return (out,)

    return make_node(table.data[ids], (table,), backward)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """out[b, s] = x[b, index[b, s]] for x of shape [B, N, D]."""
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(x.shape[0])[:, None]

    def backward(g, need):
        out = np.zeros_like(x.data)
        np.add.at(out, (np.broadcast_to(rows, index.shape), index), g)
        return (out,)

    return make_node(x.data[rows, index], (x,), backward)


# -- normalisation / probabilities ---------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g, need):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return make_node(p, (x,), backward)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain-array helper used by decoding and losses."""
    m = x.max(axis=axis, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    x, gain, bias = _t(x), _t(gain), _t(bias)
    if x.shape[-1] < 1 or gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ValueError(f"layer_norm shape mismatch: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g, need):
        gx = ggain = gbias = None
        if need[0]:
            dxhat = g * gain.data
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, g.shape[-1])
        if need[1]:
            ggain = (flat_g * xhat.reshape(flat_g.shape)).sum(axis=0)
        if need[2]:
            gbias = flat_g.sum(axis=0)
        return gx, ggain, gbias

    return make_node(out, (x, gain, bias), backward)


def softmax_cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over masked positions.

    ``logits`` has shape [..., V]; ``targets`` and ``mask`` match its leading
    shape. Raises ValueError if the mask selects nothing.
    """
    logits = _t(logits)
    V = logits.shape[-1]
    flat = logits.data.reshape(-1, V)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if mask is None:
        mask = np.ones(targets.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if targets.shape[0] != flat.shape[0] or mask.shape != targets.shape:
        raise ValueError("targets/mask do not match logits")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("mask selects no positions")
    safe_t = np.where(mask, targets, 0)
    if safe_t.min() < 0 or safe_t.max() >= V:
        raise ValueError(f"target id out of range [0, {V})")
    logp = log_softmax(flat)
    rows = np.arange(flat.shape[0])
    nll = -(logp[rows, safe_t] * mask).sum() / count

    def backward(g, need):
        grad = np.exp(logp)
        grad[rows, safe_t] -= 1.0
        grad *= (mask / count)[:, None]
        return ((g * grad).reshape(logits.shape),)

    return make_node(np.asarray(nll), (logits,), backward)


# -- convolution ---------------------------------------------------------------

def conv1d(x: Tensor, kernels: Tensor, stride: int = 1) -> Tensor:
    """Strided 1-D convolution with "same" zero padding.

    ``x`` is [T, C_in] or [B, T, C_in]; ``kernels`` is [K, C_in, C_out] with
    K odd. Output length is ceil(T / stride).
    """
    x, kernels = _t(x), _t(kernels)
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    K, c_in, c_out = kernels.shape
    if K % 2 == 0:
        raise ValueError("kernel size must be odd")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if xd.shape[-1] != c_in:
        raise ValueError(f"input has {xd.shape[-1]} channels, kernels expect {c_in}")
    B, T, _ = xd.shape
    if T < 1:
        raise ValueError("empty input sequence")
    pad = (K - 1) // 2
    t_out = (T - 1) // stride + 1
    xp = np.pad(xd, ((0, 0), (pad, pad), (0, 0)))
    span = stride * (t_out - 1) + 1
    w = kernels.data
    out = np.zeros((B, t_out, c_out), dtype=np.result_type(xd, w))
    for k in range(K):
        out += xp[:, k:k + span:stride, :] @ w[k]

    def backward(g, need):
        g3 = g[None] if squeeze else g
        gx = gw = None
        if need[0]:
            gxp = np.zeros_like(xp)
            for k in range(K):
                gxp[:, k:k + span:stride, :] += g3 @ w[k].T
            gx = gxp[:, pad:pad + T, :]
            if squeeze:
                gx = gx[0]
        if need[1]:
            gflat = g3.reshape(-1, c_out)
            gw = np.stack([xp[:, k:k + span:stride, :].reshape(-1, c_in).T @ gflat for k in range(K)])
        return gx, gw

    res = out[0] if squeeze else out
    return make_node(res, (x, kernels), backward)
