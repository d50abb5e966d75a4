"""Multi-view composition over a shared backbone.

Each view adaptor maps the same k-channel input to its own 3-channel
view; every view runs through the front of one shared backbone, the
per-view activations are pooled elementwise by an orderless function
(max by default), and the pooled activation finishes through the back of
the backbone.  A gram-matrix regularizer on the stacked views penalizes
views that collapse onto each other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .backbone import Backbone
from .tensor import Tensor

_POOLS = {"max": ops.stack_max, "mean": ops.stack_mean}


class MultiViewModel:
    """Adaptor list + shared backbone + pooling choice.

    All views share the single backbone parameter set; the only per-view
    parameters are the adaptors'.  ``pool_block`` defaults to the
    backbone's own split point (after the last block).
    """

    def __init__(self, adaptors, backbone: Backbone, pool_block: int | None = None,
                 pool_fn: str = "max"):
        if not adaptors:
            raise ValueError("need at least one view adaptor")
        if pool_fn not in _POOLS:
            raise ValueError(f"pool_fn must be one of {sorted(_POOLS)}, got {pool_fn!r}")
        self.adaptors = list(adaptors)
        self.backbone = backbone
        self.pool_block = pool_block
        self.pool_fn = pool_fn

    @property
    def num_views(self) -> int:
        return len(self.adaptors)

    def make_views(self, x: Tensor, mode: str) -> list[Tensor]:
        return [a.apply(x, mode) for a in self.adaptors]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, a in enumerate(self.adaptors):
            out.extend((f"view{i}.{n}", t) for n, t in a.named_parameters())
        out.extend((f"backbone.{n}", t) for n, t in self.backbone.named_parameters())
        return out

    def adaptor_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.named_parameters() if n.startswith("view")]

    def backbone_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.named_parameters() if n.startswith("backbone.")]


def multiview_forward(model: MultiViewModel, x: Tensor, mode: str) -> Tensor:
    """Logits for one k-channel batch through all views.

    Gradient through max pooling routes to the winning view per element
    (ties to the lowest view index).  In train mode the per-view front
    passes update the shared batchnorm running statistics sequentially in
    view order; batch statistics make the forward output itself
    order-independent.
    """
    views = model.make_views(x, mode)
    fronts = [model.backbone.forward_front(v, mode, split=model.pool_block)
              for v in views]
    pooled = _POOLS[model.pool_fn](fronts)
    return model.backbone.forward_back(pooled, mode, split=model.pool_block)


@dataclass
class DiversityRegConfig:
    """Weight and norm order for the view-diversity penalty."""

    alpha: float = 1e-2
    p: int = 2

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.p != 2:
            raise ValueError(f"only the spectral norm (p=2) is implemented, got p={self.p}")


def stack_views(views: list[Tensor]) -> Tensor:
    """Concatenate per-view 3-channel tensors into one [N, 3V, H, W] batch."""
    return ops.concat_channels(views)


def diversity_reg(stacked: Tensor, cfg: DiversityRegConfig) -> Tensor:
    """Sum over the batch of the spectral norm of each image's view gram.

    Each image's stacked views are flattened to [channels, pixels]; the
    gram of that matrix measures pairwise channel correlation, and its
    largest eigenvalue growing means views are collapsing onto a common
    subspace.  Returns alpha times the batch sum as a scalar tensor.
    """
    n, c, h, w = stacked.shape
    terms = []
    for i in range(n):
        vhat = ops.reshape(ops.select_image(stacked, i), (c, h * w))
        terms.append(ops.spectral_norm(ops.gram(vhat)))
    return ops.add_n(terms) * cfg.alpha


@dataclass
class Schedule:
    """Learning rate, epoch budget, and decay milestones."""

    lr: float
    epochs: int
    milestones: tuple[int, ...] = ()

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)


def scale_schedule(base: Schedule, num_views: int) -> Schedule:
    """Linear scaling for shared-backbone multi-view training.

    Each backbone update averages gradients over all views of a batch, so
    the effective per-view batch shrinks: divide the learning rate by the
    view count and stretch epochs and milestones by the same factor.
    One view returns the schedule unchanged.
    """
    if num_views < 1:
        raise ValueError(f"num_views must be >= 1, got {num_views}")
    if num_views == 1:
        return Schedule(base.lr, base.epochs, base.milestones)
    return Schedule(
        lr=base.lr / num_views,
        epochs=base.epochs * num_views,
        milestones=tuple(m * num_views for m in base.milestones),
    )
