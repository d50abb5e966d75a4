"""Adam optimizer with named parameter groups.

Groups exist so an input adaptor can train at a multiple of the backbone
learning rate while sharing one optimizer; group membership is inspectable
for auditing which parameters receive which rate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError, Tensor


@dataclass
class AdamState:
    """First/second moment buffers and the shared step counter."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: list[Tensor], **kwargs) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            **kwargs,
        )


def adam_step(
    params: list[Tensor],
    grads: list[np.ndarray],
    state: AdamState,
    lr: float,
    names: list[str] | None = None,
) -> None:
    """One bias-corrected Adam update, in place.

    A NaN/Inf gradient aborts before touching any parameter and reports
    which parameter produced it.
    """
    if len(params) != len(grads):
        raise ValueError(f"adam_step: {len(params)} params but {len(grads)} grads")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.data.shape:
            raise ValueError(
                f"adam_step: grad shape {g.shape} does not match param {p.data.shape}"
            )
        if not np.isfinite(g).all():
            label = names[i] if names else f"param[{i}]"
            raise NonFiniteError(f"non-finite gradient for {label}; step aborted")

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype)


@dataclass
class ParamGroup:
    name: str
    named_params: list[tuple[str, Tensor]]
    lr: float
    state: AdamState = field(init=False)

    def __post_init__(self):
        self.state = AdamState.for_params([p for _, p in self.named_params])

    @property
    def params(self) -> list[Tensor]:
        return [p for _, p in self.named_params]


class Adam:
    """Adam over one or more parameter groups, each with its own rate."""

    def __init__(self, groups: list[ParamGroup]):
        if not groups:
            raise ValueError("Adam: no parameter groups")
        self.groups = groups

    def step(self) -> None:
        for group in self.groups:
            grads = []
            for name, p in group.named_params:
                if p.grad is None:
                    grads.append(np.zeros_like(p.data))
                else:
                    grads.append(p.grad)
            adam_step(
                group.params,
                grads,
                group.state,
                group.lr,
                names=[f"{group.name}.{n}" for n, _ in group.named_params],
            )

    def zero_grad(self) -> None:
        for group in self.groups:
            for p in group.params:
                p.zero_grad()
