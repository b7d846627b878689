"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from ..errors import GradientCheckError
from .tensor import Parameter, Tensor, no_grad


@dataclass
class GradCheckReport:
    tol: float
    max_rel_error: dict = field(default_factory=dict)
    checked_entries: dict = field(default_factory=dict)

    @property
    def failures(self) -> dict:
        return {n: e for n, e in self.max_rel_error.items() if e > self.tol}

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def _eval(fn: Callable[[], Tensor], name: str) -> float:
    with no_grad():
        value = float(fn().data)
    if not np.isfinite(value):
        raise GradientCheckError(f"non-finite loss while perturbing {name!r}")
    return value


def gradient_check(fn: Callable[[], Tensor], params: Mapping[str, Parameter],
                   eps: float = 1e-5, tol: float = 1e-4, floor: float = 1e-6,
                   max_entries: Optional[int] = None,
                   rng: Optional[np.random.Generator] = None) -> GradCheckReport:
    """Compare analytic gradients of ``fn`` against central differences.

    Relative error per entry is |a - n| / max(|a|, |n|, floor). Frozen
    parameters are skipped. ``max_entries`` caps the number of entries probed
    per parameter (sampled with ``rng``); None probes every entry.
    """
    trainable = {n: p for n, p in params.items() if p.trainable}
    for p in trainable.values():
        p.grad = None
    loss = fn()
    if not np.isfinite(loss.data):
        raise GradientCheckError("non-finite loss at the unperturbed point")
    loss.backward()
    rng = rng or np.random.default_rng(0)

    report = GradCheckReport(tol=tol)
    for name, p in trainable.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = _eval(fn, name)
            flat[i] = orig - eps
            f_minus = _eval(fn, name)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
        report.max_rel_error[name] = worst
        report.checked_entries[name] = len(idx)
    return report
