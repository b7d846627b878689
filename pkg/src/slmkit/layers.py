"""Module base class and the transformer building blocks."""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .numcore import Module, Parameter, Tensor, gelu, layer_norm, linear, matmul, softmax
from .lora import LoraAdapter, lora_forward


def init_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    """y = x W^T + b, weight stored [out, in]; optionally LoRA-adapted."""

    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True, dtype=np.float64):
        self.weight = Parameter(rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_out, d_in)).astype(dtype))
        self.bias = Parameter(np.zeros(d_out, dtype=dtype)) if bias else None
        self.lora: Optional[LoraAdapter] = None

    def __call__(self, x: Tensor) -> Tensor:
        if self.lora is None:
            return linear(x, self.weight, self.bias)
        y = lora_forward(self.weight, self.lora, x)
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float64):
        self.gain = Parameter(np.ones(dim, dtype=dtype))
        self.bias = Parameter(np.zeros(dim, dtype=dtype))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self._eps)


def key_padding_mask(lengths, size: int, dtype=np.float64) -> np.ndarray:
    """Additive mask [B, 1, 1, S]: 0 on valid keys, -1e9 on padding."""
    valid = np.arange(size)[None, :] < np.asarray(lengths)[:, None]
    return np.where(valid, 0.0, -1e9).astype(dtype)[:, None, None, :]


def causal_mask(size: int, dtype=np.float64) -> np.ndarray:
    return np.triu(np.full((size, size), -1e9, dtype=dtype), 1)


class MultiHeadAttention(Module):
    def __init__(self, rng, dim: int, heads: int, dtype=np.float64):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.q = Linear(rng, dim, dim, dtype=dtype)
        self.k = Linear(rng, dim, dim, dtype=dtype)
        self.v = Linear(rng, dim, dim, dtype=dtype)
        self.o = Linear(rng, dim, dim, dtype=dtype)
        self._heads = heads

    def __call__(self, x: Tensor, memory: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        B, T, D = x.shape
        S = memory.shape[1]
        H = self._heads
        hd = D // H
        q = self.q(x).reshape(B, T, H, hd).transpose(0, 2, 1, 3)
        k = self.k(memory).reshape(B, S, H, hd).transpose(0, 2, 3, 1)
        v = self.v(memory).reshape(B, S, H, hd).transpose(0, 2, 1, 3)
        scores = matmul(q, k) * (1.0 / math.sqrt(hd))
        if mask is not None:
            scores = scores + mask
        ctx = matmul(softmax(scores, axis=-1), v)
        return self.o(ctx.transpose(0, 2, 1, 3).reshape(B, T, D))


class FeedForward(Module):
    def __init__(self, rng, dim: int, hidden: int, dtype=np.float64):
        self.up = Linear(rng, dim, hidden, dtype=dtype)
        self.down = Linear(rng, hidden, dim, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(gelu(self.up(x)))


class EncoderBlock(Module):
    """Pre-norm self-attention + feed-forward block."""

    def __init__(self, rng, dim: int, heads: int, hidden: int, dtype=np.float64):
        self.ln1 = LayerNorm(dim, dtype=dtype)
        self.attn = MultiHeadAttention(rng, dim, heads, dtype=dtype)
        self.ln2 = LayerNorm(dim, dtype=dtype)
        self.ff = FeedForward(rng, dim, hidden, dtype=dtype)

    def __call__(self, x: Tensor, mask: Optional[np.ndarray]) -> Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h, mask)
        return x + self.ff(self.ln2(x))


class DecoderBlock(Module):
    """Pre-norm causal self-attention, cross-attention and feed-forward."""

    def __init__(self, rng, dim: int, heads: int, hidden: int, dtype=np.float64):
        self.ln1 = LayerNorm(dim, dtype=dtype)
        self.self_attn = MultiHeadAttention(rng, dim, heads, dtype=dtype)
        self.ln2 = LayerNorm(dim, dtype=dtype)
        self.cross_attn = MultiHeadAttention(rng, dim, heads, dtype=dtype)
        self.ln3 = LayerNorm(dim, dtype=dtype)
        self.ff = FeedForward(rng, dim, hidden, dtype=dtype)

    def __call__(self, x: Tensor, memory: Tensor, self_mask, memory_mask) -> Tensor:
        h = self.ln1(x)
        x = x + self.self_attn(h, h, self_mask)
        x = x + self.cross_attn(self.ln2(x), memory, memory_mask)
        return x + self.ff(self.ln3(x))
