"""Strided convolution blocks mapping encoder frames to 12.5 Hz LM embeddings."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .numcore import Module, Parameter, Tensor, conv1d, layer_norm

TARGET_RATE_HZ = 12.5


def plan_strides(input_rate_hz: float) -> list:
    """Two-block stride plan reaching 12.5 Hz: 50 -> [2, 2], 25 -> [2, 1], 12.5 -> [1, 1]."""
    ratio = input_rate_hz / TARGET_RATE_HZ
    plans = {1: [1, 1], 2: [2, 1], 4: [2, 2]}
    key = round(ratio)
    if abs(ratio - key) > 1e-9 or key not in plans:
        raise ValueError(f"cannot reach {TARGET_RATE_HZ} Hz from {input_rate_hz} Hz with strides in {{1, 2}}")
    return list(plans[key])


@dataclass
class DownsampleConfig:
    in_dim: int
    out_dim: int
    input_rate_hz: float = 50.0
    kernel_sizes: list = field(default_factory=lambda: [3, 3])
    strides: Optional[list] = None

    def __post_init__(self):
        if self.strides is None:
            self.strides = plan_strides(self.input_rate_hz)
        self.validate()

    def validate(self) -> None:
        if len(self.kernel_sizes) != len(self.strides):
            raise ValueError("kernel_sizes and strides differ in length")
        if any(k % 2 == 0 or k < 1 for k in self.kernel_sizes):
            raise ValueError("kernel sizes must be odd")
        if any(s < 1 for s in self.strides):
            raise ValueError("strides must be positive")
        if not math.isclose(math.prod(self.strides), self.input_rate_hz / TARGET_RATE_HZ):
            raise ValueError(f"strides {self.strides} do not map {self.input_rate_hz} Hz to {TARGET_RATE_HZ} Hz")

    def output_length(self, T):
        for s in self.strides:
            T = (np.asarray(T) - 1) // s + 1
        return T


class Downsampler(Module):
    """conv1d (same padding) -> layer norm, per block; no nonlinearity between."""

    def __init__(self, config: DownsampleConfig, seed: int = 0, dtype=np.float64):
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        self.kernels = []
        self.gains = []
        self.biases = []
        c_in = config.in_dim
        for k in config.kernel_sizes:
            bound = 1.0 / math.sqrt(k * c_in)
            self.kernels.append(Parameter(rng.uniform(-bound, bound, size=(k, c_in, config.out_dim)).astype(dtype)))
            self.gains.append(Parameter(np.ones(config.out_dim, dtype=dtype)))
            self.biases.append(Parameter(np.zeros(config.out_dim, dtype=dtype)))
            c_in = config.out_dim

    def __call__(self, features: Tensor, lengths=None) -> Tensor:
        """Downsample [T, in_dim] or padded [B, T, in_dim].

        For batches, frames beyond each sequence's length are zeroed before
        every block so results match unpadded evaluation; output lengths are
        ``config.output_length(lengths)``.
        """
        x = features if isinstance(features, Tensor) else Tensor(features)
        single = x.ndim == 2
        if single:
            x = x.reshape(1, *x.shape)
        if x.shape[1] < 1:
            raise ValueError("empty feature sequence")
        if x.shape[-1] != self.config.in_dim:
            raise ValueError(f"expected {self.config.in_dim} input channels, got {x.shape[-1]}")
        B, T = x.shape[0], x.shape[1]
        lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
        for kernel, gain, bias, stride in zip(self.kernels, self.gains, self.biases, self.config.strides):
            valid = (np.arange(x.shape[1])[None, :] < lengths[:, None]).astype(x.data.dtype)[..., None]
            x = layer_norm(conv1d(x * valid, kernel, stride), gain, bias)
            lengths = (lengths - 1) // stride + 1
        valid = (np.arange(x.shape[1])[None, :] < lengths[:, None]).astype(x.data.dtype)[..., None]
        x = x * valid
        return x.reshape(x.shape[1], x.shape[2]) if single else x


def downsample(features, config: DownsampleConfig, params: Downsampler) -> Tensor:
    if config != params.config:
        raise ValueError("config does not match the downsampler parameters")
    return params(features)
