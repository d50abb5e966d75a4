"""Central finite-difference gradient checking.

The one numerical oracle every differentiable op is verified against:
perturb each parameter element by +-h, difference the scalar loss, and
compare to the analytic gradient from a backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tensor


@dataclass
class FiniteDiffReport:
    """Per-parameter worst relative error between analytic and numeric grads."""

    per_param: dict[str, float]

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    def __str__(self) -> str:
        lines = [f"  {k}: {v:.3e}" for k, v in self.per_param.items()]
        return "finite-difference check (max rel err per parameter)\n" + "\n".join(lines)


def _rel_err(a: np.ndarray, n: np.ndarray) -> float:
    # worst absolute difference, measured against the parameter's gradient
    # scale: a per-element ratio would compare difference-quotient rounding
    # noise to itself wherever the true gradient is near zero
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(n))), 1e-12)
    return float(np.max(np.abs(a - n)) / scale)


def finite_diff_check(
    f: Callable[[], Tensor],
    params: list[tuple[str, Tensor]],
    h: float = 1e-5,
) -> FiniteDiffReport:
    """Check d f() / d p against central differences for every element of
    every parameter.

    ``f`` must rebuild its graph from the current parameter values on each
    call and return a scalar tensor.  Parameters should be float64; at
    float32 the difference quotient is dominated by rounding.
    """
    for name, p in params:
        if not p.requires_grad:
            raise ValueError(f"finite_diff_check: parameter {name} does not require grad")
        p.zero_grad()

    loss = f()
    if loss.size != 1:
        raise ValueError(f"finite_diff_check: f() must return a scalar, got {loss.shape}")
    loss.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in params}

    report: dict[str, float] = {}
    for name, p in params:
        flat = p.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f().item()
            flat[i] = orig - h
            down = f().item()
            flat[i] = orig
            numeric[i] = (up - down) / (2.0 * h)
        report[name] = _rel_err(analytic[name].reshape(-1), numeric)

    for _, p in params:
        p.zero_grad()
    return FiniteDiffReport(report)
