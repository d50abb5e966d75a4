"""Input adaptors: k-channel images into 3-channel views.

Four adaptor families map a k-channel input onto the 3-channel domain a
color-pretrained network understands: a learned per-pixel linear
projection (optionally PCA-initialized), a fixed random channel subset,
a small trainable conv stack (optionally pretrained as the encoder half
of an autoencoder), and the identity for networks whose first layer was
inflated to ingest k channels directly.  A fifth, hand-specified merge
covers the 5-band case where physically meaningful channel groupings are
known.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .optim import Adam, ParamGroup
from .tensor import NonFiniteError, Tensor, make_op

KINDS = ("linear", "subset", "multilayer", "inflate", "manual_merge")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class AdaptorSpec:
    """Declarative description of one adaptor; builds into a runtime object.

    Exactly the fields relevant to ``kind`` may be set: ``indices`` only
    for subset, ``gain`` only for manual_merge.
    """

    kind: str
    k_in: int
    seed: int = 0
    init: str = "random"
    indices: tuple[int, int, int] | None = None
    gain: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown adaptor kind {self.kind!r}; expected one of {KINDS}")
        if self.k_in < 1:
            raise ValueError(f"k_in must be >= 1, got {self.k_in}")
        if self.indices is not None and self.kind != "subset":
            raise ValueError(f"indices only apply to subset adaptors, not {self.kind!r}")
        if self.gain is not None and self.kind != "manual_merge":
            raise ValueError(f"gain only applies to manual_merge, not {self.kind!r}")
        if self.kind == "subset":
            if self.k_in < 3:
                raise ValueError(f"subset selection needs k >= 3, got {self.k_in}")
            if self.indices is not None:
                idx = tuple(int(i) for i in self.indices)
                if len(idx) != 3 or len(set(idx)) != 3:
                    raise ValueError(f"indices must be 3 distinct values, got {idx}")
                if not all(0 <= i < self.k_in for i in idx):
                    raise ValueError(f"indices {idx} out of range [0, {self.k_in})")
                self.indices = idx
        if self.kind == "manual_merge":
            if self.k_in != 5:
                raise ValueError(f"manual_merge requires k_in = 5, got {self.k_in}")
            if self.gain is None:
                raise ValueError("manual_merge requires a gain vector")
            g = tuple(float(v) for v in self.gain)
            if len(g) != 5:
                raise ValueError(f"gain must have length 5, got {len(g)}")
            self.gain = g
        valid_init = {"linear": ("random", "pca"),
                      "multilayer": ("random", "autoencoder")}.get(self.kind, ("random",))
        if self.init not in valid_init:
            raise ValueError(f"init {self.init!r} not valid for {self.kind!r}")

    def to_record(self) -> dict:
        rec = {"kind": self.kind, "k_in": self.k_in, "seed": self.seed, "init": self.init}
        if self.indices is not None:
            rec["indices"] = list(self.indices)
        if self.gain is not None:
            rec["gain"] = list(self.gain)
        return rec

    @staticmethod
    def from_record(rec: dict) -> "AdaptorSpec":
        return AdaptorSpec(
            kind=rec["kind"], k_in=rec["k_in"], seed=rec.get("seed", 0),
            init=rec.get("init", "random"),
            indices=tuple(rec["indices"]) if "indices" in rec else None,
            gain=tuple(rec["gain"]) if "gain" in rec else None,
        )


# -- linear projection ----------------------------------------------------

def linear_adaptor(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-pixel affine projection of k channels onto 3.

    weight has shape [3, k, 1, 1] (a 1x1 filter bank), bias shape [3].
    Implemented directly as an einsum so it does not share code with the
    general convolution.
    """
    if len(x.shape) != 4:
        raise ValueError(f"expected [N,k,H,W] input, got {x.shape}")
    k = x.shape[1]
    if weight.shape != (3, k, 1, 1):
        raise ValueError(
            f"weight shape {weight.shape} does not match {k} input channels; "
            f"expected (3, {k}, 1, 1)"
        )
    if bias.shape != (3,):
        raise ValueError(f"bias shape {bias.shape}, expected (3,)")
    wmat = weight.data[:, :, 0, 0]
    out = np.einsum("nchw,oc->nohw", x.data, wmat) + bias.data[None, :, None, None]

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(np.einsum("nohw,oc->nchw", g, wmat))
        if weight.requires_grad:
            gw = np.einsum("nohw,nchw->oc", g, x.data)
            weight.accumulate_grad(gw[:, :, None, None])
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)))

    return make_op("linear_adaptor", np.ascontiguousarray(out), (x, weight, bias), backward)


def pca_init(pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Projection onto the top-3 principal directions of a pixel sample.

    Returns (weight [3,k,1,1], bias [3]) such that the projected data is
    zero-mean.  Rows are orthonormal, ordered by descending variance,
    sign-fixed so each row's largest-magnitude entry is positive.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 2:
        raise ValueError(f"expected [M,k] pixel sample, got shape {pixels.shape}")
    m, k = pixels.shape
    if m < k:
        raise ValueError(f"need at least k={k} pixels, got {m}")
    mean = pixels.mean(axis=0)
    centered = pixels - mean
    cov = centered.T @ centered / m
    eigval, eigvec = np.linalg.eigh(cov)
    rank = int((eigval > max(eigval[-1], 0.0) * 1e-10 + 1e-30).sum())
    if rank < 3:
        raise ValueError(f"pixel covariance rank {rank} < 3; sample spans too few directions")
    rows = eigvec[:, ::-1][:, :3].T  # descending eigenvalue order
    for i in range(3):
        j = int(np.argmax(np.abs(rows[i])))
        if rows[i, j] < 0:
            rows[i] = -rows[i]
    weight = rows[:, :, None, None].copy()
    bias = -rows @ mean
    return weight, bias


class LinearAdaptor:
    """Trainable 1x1 projection; random or PCA initialization."""

    out_channels = 3

    def __init__(self, k_in: int, seed: int = 0, pca_pixels: np.ndarray | None = None,
                 dtype=np.float32):
        dtype = np.dtype(dtype)
        self.k_in = int(k_in)
        if pca_pixels is not None:
            w, b = pca_init(pca_pixels)
        else:
            rng = np.random.default_rng(seed)
            w = rng.standard_normal((3, k_in, 1, 1)) / np.sqrt(k_in)
            b = np.zeros(3)
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(b.astype(dtype), requires_grad=True)

    def apply(self, x: Tensor, mode: str = "eval") -> Tensor:
        return linear_adaptor(x, self.weight, self.bias)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [("weight", self.weight), ("bias", self.bias)]


# -- channel subset -------------------------------------------------------

def sample_subset(k: int, seed: int) -> tuple[int, int, int]:
    """Three distinct channel indices drawn uniformly; order as sampled."""
    if k < 3:
        raise ValueError(f"subset selection needs k >= 3, got {k}")
    rng = np.random.default_rng(seed)
    return tuple(int(i) for i in rng.choice(k, size=3, replace=False))


def subset_adaptor(x: Tensor, indices) -> Tensor:
    """Gather 3 channels in the given order."""
    idx = tuple(int(i) for i in indices)
    if len(idx) != 3 or len(set(idx)) != 3:
        raise ValueError(f"indices must be 3 distinct values, got {idx}")
    k = x.shape[1]
    if not all(0 <= i < k for i in idx):
        raise ValueError(f"indices {idx} out of range [0, {k})")
    out = np.ascontiguousarray(x.data[:, idx])

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[:, idx] = g  # indices are distinct, plain scatter suffices
            x.accumulate_grad(gx)

    return make_op("subset_adaptor", out, (x,), backward)


class SubsetAdaptor:
    """Fixed random channel triple; no trainable parameters."""

    out_channels = 3

    def __init__(self, k_in: int, seed: int = 0, indices=None):
        self.k_in = int(k_in)
        self.indices = tuple(indices) if indices is not None else sample_subset(k_in, seed)

    def apply(self, x: Tensor, mode: str = "eval") -> Tensor:
        return subset_adaptor(x, self.indices)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return []


# -- multi-layer conv stack -----------------------------------------------

class MultiLayerAdaptor:
    """Four 3x3 conv layers (16 filters, batchnorm, relu) and a 1x1 reduction.

    Spatial extents are preserved throughout; the final 1x1 layer brings
    the width down to 3 channels.
    """

    out_channels = 3
    hidden = 16
    depth = 4

    def __init__(self, k_in: int, seed: int = 0, dtype=np.float32, out_channels: int = 3):
        dtype = np.dtype(dtype)
        self.k_in = int(k_in)
        self.out_channels = int(out_channels)
        rng = np.random.default_rng(seed)
        self.layers = []
        c = self.k_in
        for _ in range(self.depth):
            w = rng.standard_normal((self.hidden, c, 3, 3)) * np.sqrt(2.0 / (c * 9))
            self.layers.append({
                "w": Tensor(w.astype(dtype), requires_grad=True),
                "b": Tensor(np.zeros(self.hidden, dtype=dtype), requires_grad=True),
                "gamma": Tensor(np.ones(self.hidden, dtype=dtype), requires_grad=True),
                "beta": Tensor(np.zeros(self.hidden, dtype=dtype), requires_grad=True),
                "running": ops.RunningStats.create(self.hidden, dtype),
            })
            c = self.hidden
        w = rng.standard_normal((self.out_channels, c, 1, 1)) * np.sqrt(2.0 / c)
        self.final_w = Tensor(w.astype(dtype), requires_grad=True)
        self.final_b = Tensor(np.zeros(self.out_channels, dtype=dtype), requires_grad=True)

    def apply(self, x: Tensor, mode: str = "eval") -> Tensor:
        h = x
        for layer in self.layers:
            h = ops.conv2d(h, layer["w"], layer["b"], padding=1)
            h = ops.relu(ops.batchnorm2d(h, layer["gamma"], layer["beta"],
                                         layer["running"], mode))
        return ops.conv2d(h, self.final_w, self.final_b)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            out += [(f"layer{i}.weight", layer["w"]), (f"layer{i}.bias", layer["b"]),
                    (f"layer{i}.gamma", layer["gamma"]), (f"layer{i}.beta", layer["beta"])]
        out += [("final.weight", self.final_w), ("final.bias", self.final_b)]
        return out


def autoencoder_pretrain(encoder: MultiLayerAdaptor, data: np.ndarray,
                         epochs: int = 10, lr: float = 1e-3, batch: int = 64,
                         seed: int = 0) -> list[float]:
    """Train the adaptor as the encoder half of a reconstruction autoencoder.

    The decoder mirrors the encoder (same stack, final 1x1 back to k
    channels), is trained jointly on mean squared reconstruction error,
    and is discarded; ``encoder`` is updated in place.  Returns mean loss
    per epoch.
    """
    data = np.asarray(data)
    if data.ndim != 4 or data.shape[1] != encoder.k_in:
        raise ValueError(
            f"expected [N,{encoder.k_in},H,W] data, got shape {data.shape}"
        )
    dtype = encoder.final_w.data.dtype
    decoder = MultiLayerAdaptor(3, seed=seed + 1, dtype=dtype,
                                out_channels=encoder.k_in)
    params = ([("enc." + n, t) for n, t in encoder.named_parameters()]
              + [("dec." + n, t) for n, t in decoder.named_parameters()])
    opt = Adam([ParamGroup("autoencoder", params, lr=lr)])
    rng = np.random.default_rng(seed)
    n = data.shape[0]
    history = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, batch):
            xb = np.ascontiguousarray(data[order[start:start + batch]]).astype(dtype)
            x = Tensor(xb)
            try:
                code = encoder.apply(x, "train")
                recon = decoder.apply(code, "train")
                loss = ops.mse(recon, Tensor(xb.copy()))
                opt.zero_grad()
                loss.backward()
                opt.step()
            except NonFiniteError as err:
                raise DivergenceError(
                    f"autoencoder diverged at epoch {epoch}: {err}"
                ) from err
            total += loss.item() * xb.shape[0]
            count += xb.shape[0]
        history.append(total / count)
    return history


# -- manual 5-band merge --------------------------------------------------

def manual_merge(x: Tensor, gain) -> Tensor:
    """Hand-specified merge of 5 bands into RGB.

    With bands (x0..x4) ordered bluest to reddest and per-band gains g:
    R = (g3*x3 + g4*x4)/2, G = g2*x2, B = (g0*x0 + g1*x1)/2.
    """
    g = np.asarray(gain, dtype=np.float64)
    if g.shape != (5,):
        raise ValueError(f"gain must have 5 entries, got shape {g.shape}")
    if len(x.shape) != 4 or x.shape[1] != 5:
        raise ValueError(f"manual_merge expects [N,5,H,W], got {x.shape}")
    g = g.astype(x.data.dtype)
    d = x.data
    r = (g[3] * d[:, 3] + g[4] * d[:, 4]) / 2
    gr = g[2] * d[:, 2]
    b = (g[0] * d[:, 0] + g[1] * d[:, 1]) / 2
    out = np.ascontiguousarray(np.stack([r, gr, b], axis=1))

    def backward(grad: np.ndarray) -> None:
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[:, 3] = grad[:, 0] * g[3] / 2
            gx[:, 4] = grad[:, 0] * g[4] / 2
            gx[:, 2] = grad[:, 1] * g[2]
            gx[:, 0] = grad[:, 2] * g[0] / 2
            gx[:, 1] = grad[:, 2] * g[1] / 2
            x.accumulate_grad(gx)

    return make_op("manual_merge", out, (x,), backward)


class ManualMergeAdaptor:
    """Fixed 5-band merge; gains are data, not parameters."""

    out_channels = 3

    def __init__(self, gain):
        g = tuple(float(v) for v in gain)
        if len(g) != 5:
            raise ValueError(f"gain must have 5 entries, got {len(g)}")
        self.k_in = 5
        self.gain = g

    def apply(self, x: Tensor, mode: str = "eval") -> Tensor:
        return manual_merge(x, self.gain)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return []


class IdentityAdaptor:
    """Pass-through for inflated networks that ingest k channels directly."""

    def __init__(self, k_in: int):
        self.k_in = int(k_in)
        self.out_channels = self.k_in

    def apply(self, x: Tensor, mode: str = "eval") -> Tensor:
        if x.shape[1] != self.k_in:
            raise ValueError(f"expected {self.k_in} channels, got {x.shape[1]}")
        return x

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return []


def build_adaptor(spec: AdaptorSpec, pca_pixels: np.ndarray | None = None,
                  dtype=np.float32):
    """Instantiate the runtime adaptor described by a spec.

    ``pca_pixels`` supplies the sample for PCA initialization; it is
    required when spec.init == "pca".  Autoencoder pretraining happens
    separately (it needs a dataset and a training budget).
    """
    if spec.kind == "linear":
        if spec.init == "pca":
            if pca_pixels is None:
                raise ValueError("PCA initialization needs a pixel sample")
            return LinearAdaptor(spec.k_in, seed=spec.seed, pca_pixels=pca_pixels,
                                 dtype=dtype)
        return LinearAdaptor(spec.k_in, seed=spec.seed, dtype=dtype)
    if spec.kind == "subset":
        return SubsetAdaptor(spec.k_in, seed=spec.seed, indices=spec.indices)
    if spec.kind == "multilayer":
        return MultiLayerAdaptor(spec.k_in, seed=spec.seed, dtype=dtype)
    if spec.kind == "manual_merge":
        return ManualMergeAdaptor(spec.gain)
    if spec.kind == "inflate":
        return IdentityAdaptor(spec.k_in)
    raise ValueError(f"unknown adaptor kind {spec.kind!r}")
