"""Low-rank adapters over frozen projection matrices."""

from __future__ import annotations

import numpy as np

from .numcore import Module, Parameter, Tensor, linear


class LoraAdapter(Module):
    """Trainable delta (alpha / rank) * B @ A for a frozen [out, in] matrix.

    A starts Gaussian (std 0.02) and B starts at zero, so an attached adapter
    leaves the base output unchanged until B is updated.
    """

    def __init__(self, target: str, d_in: int, d_out: int, rank: int, alpha: float | None = None,
                 rng: np.random.Generator | None = None, dtype=np.float64):
        if rank <= 0:
            raise ValueError(f"LoRA rank must be positive, got {rank}")
        rng = rng or np.random.default_rng(0)
        self.target = target
        self.rank = rank
        self.alpha = float(rank if alpha is None else alpha)
        self.A = Parameter(rng.normal(0.0, 0.02, size=(rank, d_in)).astype(dtype))
        self.B = Parameter(np.zeros((d_out, rank), dtype=dtype))

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def num_parameters(self) -> int:
        return self.A.data.size + self.B.data.size

    def delta(self) -> np.ndarray:
        return self.scale * (self.B.data @ self.A.data)

    def merged(self, base_weight: np.ndarray) -> np.ndarray:
        return base_weight + self.delta()


def lora_forward(base_weight: Tensor, adapter: LoraAdapter, x: Tensor) -> Tensor:
    """W x + (alpha / r) B (A x) in row-vector form: x W^T + s (x A^T) B^T."""
    base = linear(x, base_weight)
    low = linear(linear(x, adapter.A), adapter.B)
    return base + low * adapter.scale
