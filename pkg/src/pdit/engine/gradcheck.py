"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckResult:
    max_rel_error: float
    max_abs_error: float
    n_checked: int
    n_failed: int

    @property
    def ok(self) -> bool:
        return self.n_failed == 0


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, index, eps: float) -> float:
    orig = t.data[index].copy()
    t.data[index] = orig + eps
    fp = float(fn().data)
    t.data[index] = orig - eps
    fm = float(fn().data)
    t.data[index] = orig
    return (fp - fm) / (2.0 * eps)


def compare(analytic: float, numeric: float, rtol: float, atol: float) -> tuple[float, float, bool]:
    diff = abs(analytic - numeric)
    denom = max(abs(analytic), abs(numeric))
    rel = diff / denom if denom > 0 else 0.0
    return rel, diff, (diff <= atol or rel < rtol)


def gradcheck(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    *,
    eps: float = 1e-6,
    rtol: float = 1e-6,
    atol: float = 1e-8,
    max_per_input: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckResult:
    """Compare backprop gradients of scalar ``fn()`` against central
    differences for each entry of ``inputs`` (optionally a random subset)."""
    for t in inputs:
        t.grad = None
    loss = fn()
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    rng = rng or np.random.default_rng(0)
    worst_rel = worst_abs = 0.0
    checked = failed = 0
    for t, ga in zip(inputs, analytic):
        flat = list(np.ndindex(t.shape))
        if max_per_input is not None and len(flat) > max_per_input:
            pick = rng.choice(len(flat), size=max_per_input, replace=False)
            flat = [flat[i] for i in sorted(pick)]
        for idx in flat:
            num = numeric_grad(fn, t, idx, eps)
            rel, diff, ok = compare(float(ga[idx]), num, rtol, atol)
            worst_rel = max(worst_rel, rel if diff > atol else 0.0)
            worst_abs = max(worst_abs, diff)
            checked += 1
            failed += not ok
    return GradCheckResult(worst_rel, worst_abs, checked, failed)
