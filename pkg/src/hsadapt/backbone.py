"""Toy convolutional classifier with a named split point.

Three conv blocks stand in for a large color-pretrained network at desk
scale.  Each block is [conv -> batchnorm -> relu] x2 followed by 2x2 max
pooling; the classifier is global average pooling into one dense layer.
The network can be split at any block boundary into a front part and a
back part whose composition reproduces the unsplit forward pass bit for
bit; multi-view pooling inserts between the two parts.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import Tensor, read_array, write_array


def _kaiming(rng, shape, dtype):
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class ConvBlock:
    """[conv3x3 -> batchnorm -> relu] x2 then 2x2 max pool."""

    def __init__(self, c_in: int, c_out: int, rng, dtype):
        self.conv1_w = Tensor(_kaiming(rng, (c_out, c_in, 3, 3), dtype), requires_grad=True)
        self.conv1_b = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        self.bn1_gamma = Tensor(np.ones(c_out, dtype=dtype), requires_grad=True)
        self.bn1_beta = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        self.bn1_running = ops.RunningStats.create(c_out, dtype)
        self.conv2_w = Tensor(_kaiming(rng, (c_out, c_out, 3, 3), dtype), requires_grad=True)
        self.conv2_b = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        self.bn2_gamma = Tensor(np.ones(c_out, dtype=dtype), requires_grad=True)
        self.bn2_beta = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        self.bn2_running = ops.RunningStats.create(c_out, dtype)

    def forward(self, x: Tensor, mode: str) -> Tensor:
        x = ops.conv2d(x, self.conv1_w, self.conv1_b, padding=1)
        x = ops.relu(ops.batchnorm2d(x, self.bn1_gamma, self.bn1_beta, self.bn1_running, mode))
        x = ops.conv2d(x, self.conv2_w, self.conv2_b, padding=1)
        x = ops.relu(ops.batchnorm2d(x, self.bn2_gamma, self.bn2_beta, self.bn2_running, mode))
        return ops.maxpool2d(x, 2)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [
            ("conv1.weight", self.conv1_w), ("conv1.bias", self.conv1_b),
            ("bn1.gamma", self.bn1_gamma), ("bn1.beta", self.bn1_beta),
            ("conv2.weight", self.conv2_w), ("conv2.bias", self.conv2_b),
            ("bn2.gamma", self.bn2_gamma), ("bn2.beta", self.bn2_beta),
        ]

    def named_running(self) -> list[tuple[str, ops.RunningStats]]:
        return [("bn1", self.bn1_running), ("bn2", self.bn2_running)]


class Backbone:
    """Blocked conv classifier; splittable between any two blocks.

    ``pool_block`` names the block after which the front part ends
    (default: the last block, so the back part is just the classifier).
    """

    def __init__(self, input_channels: int = 3, widths=(16, 32, 64),
                 num_classes: int = 8, seed: int = 0, dtype=np.float32):
        if input_channels < 1:
            raise ValueError(f"input_channels must be >= 1, got {input_channels}")
        if not widths:
            raise ValueError("widths must name at least one block")
        self.input_channels = int(input_channels)
        self.widths = tuple(int(w) for w in widths)
        self.num_classes = int(num_classes)
        self.dtype = np.dtype(dtype)
        self.init_seed = int(seed)
        self.pool_block = len(self.widths) - 1

        rng = np.random.default_rng(seed)
        self.blocks: list[ConvBlock] = []
        c = self.input_channels
        for w in self.widths:
            self.blocks.append(ConvBlock(c, w, rng, self.dtype))
            c = w
        fan_in = self.widths[-1]
        bound = 1.0 / np.sqrt(fan_in)
        self.head_w = Tensor(
            rng.uniform(-bound, bound, (fan_in, self.num_classes)).astype(self.dtype),
            requires_grad=True,
        )
        self.head_b = Tensor(
            rng.uniform(-bound, bound, self.num_classes).astype(self.dtype),
            requires_grad=True,
        )

    # -- forward ----------------------------------------------------------

    def forward_front(self, x: Tensor, mode: str, split: int | None = None) -> Tensor:
        """Blocks 0..split inclusive (the CNN that runs per view)."""
        split = self.pool_block if split is None else split
        if not 0 <= split < len(self.blocks):
            raise ValueError(f"split {split} outside blocks [0, {len(self.blocks)})")
        if x.shape[1] != self.input_channels:
            raise ValueError(
                f"input has {x.shape[1]} channels, network expects {self.input_channels}"
            )
        h = x
        for block in self.blocks[:split + 1]:
            h = block.forward(h, mode)
        return h

    def forward_back(self, h: Tensor, mode: str, split: int | None = None) -> Tensor:
        """Blocks after split, then global average pool and the head."""
        split = self.pool_block if split is None else split
        for block in self.blocks[split + 1:]:
            h = block.forward(h, mode)
        return ops.dense(ops.global_avg_pool(h), self.head_w, self.head_b)

    def forward(self, x: Tensor, mode: str) -> Tensor:
        return self.forward_back(self.forward_front(x, mode), mode)

    # -- parameter access -------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, block in enumerate(self.blocks):
            out.extend((f"block{i}.{name}", t) for name, t in block.named_parameters())
        out.append(("head.weight", self.head_w))
        out.append(("head.bias", self.head_b))
        return out

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, block in enumerate(self.blocks):
            for bn, rs in block.named_running():
                out.append((f"block{i}.{bn}.running_mean", rs.mean))
                out.append((f"block{i}.{bn}.running_var", rs.var))
        return out

    def num_parameters(self) -> int:
        return sum(t.data.size for _, t in self.named_parameters())

    def zero_grad(self) -> None:
        for _, t in self.named_parameters():
            t.zero_grad()

    def descriptor(self) -> dict:
        return {
            "input_channels": self.input_channels,
            "widths": list(self.widths),
            "num_classes": self.num_classes,
            "dtype": self.dtype.name,
            "pool_block": self.pool_block,
        }

    def clone(self) -> "Backbone":
        new = Backbone(self.input_channels, self.widths, self.num_classes,
                       seed=self.init_seed, dtype=self.dtype)
        new.pool_block = self.pool_block
        for (_, dst), (_, src) in zip(new.named_parameters(), self.named_parameters()):
            dst.data = src.data.copy()
        for bnew, bold in zip(new.blocks, self.blocks):
            for (_, rs_new), (_, rs_old) in zip(bnew.named_running(), bold.named_running()):
                rs_new.mean = rs_old.mean.copy()
                rs_new.var = rs_old.var.copy()
        return new


def replace_head(net: Backbone, num_classes: int, seed: int = 0) -> Backbone:
    """New network with a freshly initialized dense head.

    Every non-head parameter and running statistic is preserved bit for
    bit; only the classifier changes.
    """
    new = net.clone()
    new.num_classes = int(num_classes)
    rng = np.random.default_rng(seed)
    fan_in = new.widths[-1]
    bound = 1.0 / np.sqrt(fan_in)
    new.head_w = Tensor(
        rng.uniform(-bound, bound, (fan_in, num_classes)).astype(new.dtype),
        requires_grad=True,
    )
    new.head_b = Tensor(
        rng.uniform(-bound, bound, num_classes).astype(new.dtype), requires_grad=True
    )
    return new


def inflate_first_layer(net: Backbone, k: int) -> Backbone:
    """Widen the first conv layer to k input channels by mean replication.

    Each filter's input-channel slices are replaced by their mean, copied
    k times; the bias is untouched and no magnitude rescaling is applied,
    so on an input whose k channels are all equal the first layer's
    response reproduces the 3-channel response (up to rounding).
    """
    if net.input_channels != 3:
        raise ValueError(
            f"inflation expects a 3-channel network, got {net.input_channels} channels"
        )
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    new = net.clone()
    w = new.blocks[0].conv1_w.data
    mean = w.mean(axis=1, keepdims=True)
    new.blocks[0].conv1_w = Tensor(np.repeat(mean, k, axis=1), requires_grad=True)
    new.input_channels = int(k)
    return new


# -- checkpoint container -------------------------------------------------

_MAGIC = b"HSCK"
_VERSION = 1


@dataclass
class Checkpoint:
    """Architecture descriptor, free-form metadata, and named tensors.

    The tensor dict order is the file order, and the descriptor is stored
    as canonical JSON, so save -> load -> save is byte-identical.
    """

    arch: dict
    meta: dict
    tensors: dict[str, np.ndarray]

    def write(self, path) -> None:
        header = json.dumps(
            {"arch": self.arch, "meta": self.meta, "tensors": list(self.tensors)},
            sort_keys=True, separators=(",", ":"),
        ).encode("utf-8")
        with open(path, "wb") as f:
            f.write(_MAGIC)
            f.write(struct.pack("<BI", _VERSION, len(header)))
            f.write(header)
            for name in self.tensors:
                write_array(f, self.tensors[name])

    @staticmethod
    def read(path) -> "Checkpoint":
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != _MAGIC:
                raise ValueError(f"bad magic {magic!r}; not a checkpoint file")
            version, hlen = struct.unpack("<BI", f.read(5))
            if version != _VERSION:
                raise ValueError(f"unsupported checkpoint version {version}")
            header = json.loads(f.read(hlen).decode("utf-8"))
            tensors = {name: read_array(f) for name in header["tensors"]}
        return Checkpoint(arch=header["arch"], meta=header["meta"], tensors=tensors)


def make_checkpoint(net: Backbone, meta: dict | None = None,
                    extra: dict[str, np.ndarray] | None = None) -> Checkpoint:
    """Snapshot the network; extra tensors (e.g. adaptor weights) ride along."""
    tensors: dict[str, np.ndarray] = {}
    for name, t in net.named_parameters():
        tensors[name] = t.data.copy()
    for name, arr in net.named_buffers():
        tensors[name] = arr.copy()
    for name, arr in (extra or {}).items():
        if name in tensors:
            raise ValueError(f"extra tensor name {name!r} collides with the network")
        tensors[name] = np.asarray(arr).copy()
    return Checkpoint(arch=net.descriptor(), meta=dict(meta or {}), tensors=tensors)


def load_into(net: Backbone, ckpt: Checkpoint) -> None:
    """Copy checkpoint tensors into an existing network of the same shape."""
    if ckpt.arch != net.descriptor():
        raise ValueError(
            f"checkpoint architecture {ckpt.arch} does not match network {net.descriptor()}"
        )
    for name, t in net.named_parameters():
        arr = ckpt.tensors.get(name)
        if arr is None:
            raise ValueError(f"checkpoint missing tensor {name!r}")
        if arr.shape != t.data.shape:
            raise ValueError(f"tensor {name!r} shape {arr.shape} != {t.data.shape}")
        t.data = np.asarray(arr, order="C").copy()
        t.grad = None
    for i, block in enumerate(net.blocks):
        for bn, rs in block.named_running():
            rs.mean = ckpt.tensors[f"block{i}.{bn}.running_mean"].copy()
            rs.var = ckpt.tensors[f"block{i}.{bn}.running_var"].copy()


def restore(ckpt: Checkpoint) -> Backbone:
    """Build a fresh network from the checkpoint's own descriptor."""
    arch = ckpt.arch
    net = Backbone(arch["input_channels"], arch["widths"], arch["num_classes"],
                   seed=0, dtype=np.dtype(arch["dtype"]))
    net.pool_block = arch["pool_block"]
    load_into(net, ckpt)
    return net
