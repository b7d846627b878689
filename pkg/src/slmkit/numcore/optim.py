"""AdamW with decoupled weight decay and the inverse-square-root LR schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from ..errors import InvalidStateError
from .tensor import Parameter


def lr_at(step: int, peak_lr: float, warmup_steps: int) -> float:
    """Linear warmup to ``peak_lr`` at ``warmup_steps``, then 1/sqrt decay."""
    if step < 1:
        raise ValueError("step must be >= 1")
    if warmup_steps < 1:
        raise ValueError("warmup_steps must be >= 1")
    return peak_lr * min(step / warmup_steps, math.sqrt(warmup_steps / step))


@dataclass
class OptimizerState:
    peak_lr: float
    warmup_steps: int
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def current_lr(self) -> float:
        return lr_at(max(self.step, 1), self.peak_lr, self.warmup_steps)


def adamw_step(state: OptimizerState, params: Mapping[str, Parameter],
               grads: Optional[Mapping[str, np.ndarray]] = None) -> float:
    """Apply one AdamW update in place to every trainable parameter.

    Gradients default to ``param.grad``. Frozen parameters are never touched.
    Returns the learning rate used.
    """
    trainable = {n: p for n, p in params.items() if p.trainable}
    resolved = {}
    for name, p in trainable.items():
        g = grads.get(name) if grads is not None else p.grad
        if g is None:
            raise InvalidStateError(f"missing gradient for trainable parameter {name!r}")
        if g.shape != p.shape:
            raise InvalidStateError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        resolved[name] = g

    state.step += 1
    lr = lr_at(state.step, state.peak_lr, state.warmup_steps)
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in trainable.items():
        g = resolved[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = p.data - lr * (update + state.weight_decay * p.data)
    return lr
