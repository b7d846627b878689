"""Frozen multi-layer audio encoder stand-in and learnable layer fusion."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import EncoderBlock, Linear, key_padding_mask
from .numcore import Module, Parameter, Tensor, mul, stack as stack_tensors, sum_

SUPPORTED_RATES = (50.0, 25.0, 12.5)


@dataclass
class EncoderConfig:
    # full scale: 24 layers, dim 768, 8 heads, 4x temporal reduction
    num_layers: int = 4
    feature_dim: int = 32
    num_heads: int = 2
    ff_dim: int = 64
    raw_dim: int = 32
    frame_rate_hz: float = 50.0
    temporal_reduction: int = 4
    seed: int = 0

    def __post_init__(self):
        if min(self.num_layers, self.feature_dim, self.num_heads, self.raw_dim,
               self.temporal_reduction, self.ff_dim) < 1:
            raise ValueError("encoder sizes must be positive")
        if self.feature_dim % self.num_heads:
            raise ValueError("feature_dim must be divisible by num_heads")
        if float(self.frame_rate_hz) not in SUPPORTED_RATES:
            raise ValueError(f"frame_rate_hz must be one of {SUPPORTED_RATES}")


@dataclass
class LayerStack:
    """Outputs of every encoder layer, each [B, T, D], plus valid lengths."""

    layers: list
    lengths: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.layers)

    @property
    def shape(self) -> tuple:
        return self.layers[0].shape


def sinusoid_positions(length: int, dim: int, dtype=np.float64) -> np.ndarray:
    pos = np.arange(length)[:, None]
    freq = np.exp(-np.log(10000.0) * (np.arange(0, dim, 2) / dim))
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq[: dim // 2])
    return table.astype(dtype)


class AudioEncoder(Module):
    """Pre-norm transformer over (optionally frame-stacked) raw features."""

    def __init__(self, config: EncoderConfig, dtype=np.float64):
        self.config = config
        rng = np.random.default_rng(config.seed)
        d = config.feature_dim
        self.input_proj = Linear(rng, config.raw_dim * config.temporal_reduction, d, dtype=dtype)
        self.mask_embedding = Parameter(rng.normal(0.0, 0.1, size=config.raw_dim).astype(dtype))
        self.blocks = [EncoderBlock(rng, d, config.num_heads, config.ff_dim, dtype=dtype)
                       for _ in range(config.num_layers)]
        self._dtype = dtype

    def output_lengths(self, lengths) -> np.ndarray:
        return np.asarray(lengths, dtype=np.int64) // self.config.temporal_reduction

    def encode(self, audio, lengths=None, frame_mask=None) -> LayerStack:
        """Run the encoder and return all layer outputs.

        ``audio`` is [T, D_raw] or a padded batch [B, T, D_raw]. ``frame_mask``
        (bool, same leading shape) marks raw frames to replace with the learned
        mask embedding.
        """
        cfg = self.config
        data = audio.data if isinstance(audio, Tensor) else np.asarray(audio, dtype=self._dtype)
        if data.ndim == 2:
            data = data[None]
            if frame_mask is not None:
                frame_mask = np.asarray(frame_mask)[None]
        if data.shape[-1] != cfg.raw_dim:
            raise ValueError(f"audio feature dim {data.shape[-1]} != encoder raw_dim {cfg.raw_dim}")
        B, T, _ = data.shape
        if T < 1:
            raise ValueError("empty audio")
        lengths = np.full(B, T, dtype=np.int64) if lengths is None else np.asarray(lengths, dtype=np.int64)
        x = Tensor(data)
        if frame_mask is not None:
            m = np.asarray(frame_mask, dtype=data.dtype)[..., None]
            x = x * (1.0 - m) + mul(self.mask_embedding, m)
        r = cfg.temporal_reduction
        t_out = T // r
        if t_out < 1:
            raise ValueError(f"need at least {r} frames for temporal reduction {r}")
        if r > 1:
            x = x[:, : t_out * r].reshape(B, t_out, r * cfg.raw_dim)
        out_len = self.output_lengths(lengths)
        h = self.input_proj(x) + sinusoid_positions(t_out, cfg.feature_dim, self._dtype)
        mask = key_padding_mask(out_len, t_out, self._dtype)
        layers = []
        for block in self.blocks:
            h = block(h, mask)
            layers.append(h)
        return LayerStack(layers, out_len)


class LayerCombiner(Module):
    """Learnable scalar weights over encoder layers.

    ``weighted`` mode returns (1/L) * sum_l w_l h_l with unconstrained w
    (initialised to 1); ``last_layer`` mode returns h_L and ignores w.
    """

    MODES = ("weighted", "last_layer")

    def __init__(self, num_layers: int, mode: str = "weighted", dtype=np.float64):
        if mode not in self.MODES:
            raise ValueError(f"mode must be one of {self.MODES}")
        self.weights = Parameter(np.ones(num_layers, dtype=dtype))
        self.mode = mode


def combine(stack: LayerStack, combiner: LayerCombiner) -> Tensor:
    L = len(stack.layers)
    if combiner.mode == "last_layer":
        return stack.layers[-1]
    if combiner.weights.shape != (L,):
        raise ValueError(f"combiner has {combiner.weights.shape[0]} weights for {L} layers")
    layers = stack_tensors(stack.layers, axis=0)
    w = combiner.weights.reshape((L,) + (1,) * (layers.ndim - 1))
    return sum_(layers * w, axis=0) * (1.0 / L)
