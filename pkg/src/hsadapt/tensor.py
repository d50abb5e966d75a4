"""Dense tensor with reverse-mode automatic differentiation.

A ``Tensor`` wraps a row-major contiguous numpy array (float32 or float64)
together with an optional gradient buffer.  Operations record a backward
closure and their input tensors; calling :meth:`Tensor.backward` on a result
walks the recorded graph once in reverse topological order, accumulating
gradients into every tensor that requires them.

Every operation checks its output for NaN/Inf and raises
:class:`NonFiniteError` instead of letting bad values propagate.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)

_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_DTYPES = {1: np.dtype(np.float32), 2: np.dtype(np.float64)}

_MAGIC = b"SPAT"
_VERSION = 1


class NonFiniteError(ArithmeticError):
    """A value became NaN or Inf where only finite values are allowed."""


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        arr = arr.astype(np.float32)
    return np.ascontiguousarray(arr)


class Tensor:
    """n-dimensional float array with optional gradient tracking.

    Attributes:
        data: row-major contiguous numpy array (float32 or float64).
        requires_grad: whether backward passes accumulate into ``grad``.
        grad: gradient buffer with the same shape/dtype as ``data``,
            allocated lazily on first accumulation.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._prev: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = ""
        self._backward_ran = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        flags = []
        if self.requires_grad:
            flags.append("requires_grad")
        if self._op:
            flags.append(f"op={self._op}")
        suffix = (", " + ", ".join(flags)) if flags else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{suffix})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode pass from this tensor.

        Seeds the output gradient with ones, then visits every recorded
        operation exactly once in reverse topological order.  A second call
        without rebuilding the graph is an error: the closures have already
        consumed their saved state.
        """
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if self._backward_ran:
            raise RuntimeError(
                "backward() already ran on this graph; re-run the forward pass first"
            )

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                if id(parent) not in seen:
                    stack.append((parent, False))

        self.accumulate_grad(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None:
                if node._backward_ran:
                    raise RuntimeError("graph node visited twice during backward()")
                node._backward(node.grad)
                node._backward_ran = True
        self._backward_ran = True

    # Small operator surface; network layers use the dedicated ops module.
    def __add__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return _add(self, other)
        return _add_scalar(self, float(other))

    __radd__ = __add__

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return _mul(self, other)
        return _scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return _scale(self, -1.0)

    def sum(self) -> "Tensor":
        out_data = np.asarray(self.data.sum(), dtype=self.data.dtype)

        def backward(g: np.ndarray) -> None:
            if self.requires_grad:
                self.accumulate_grad(np.broadcast_to(g, self.data.shape).copy())

        return make_op("sum", out_data, (self,), backward)


def check_dtypes(op: str, tensors: Sequence[Tensor]) -> np.dtype:
    """All tensor inputs of one op must share a single float dtype."""
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        names = sorted(d.name for d in dtypes)
        raise ValueError(f"{op}: mixed dtypes {names}; cast inputs to a common dtype")
    return next(iter(dtypes))


def make_op(
    name: str,
    out_data: np.ndarray,
    inputs: tuple[Tensor, ...],
    backward: Callable[[np.ndarray], None],
) -> Tensor:
    """Wrap an op result, enforcing the finite-values invariant."""
    if not np.isfinite(out_data).all():
        raise NonFiniteError(f"{name} produced non-finite values")
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs))
    out._prev = tuple(inputs)
    out._op = name
    if out.requires_grad:
        out._backward = backward
    return out


def _add(a: Tensor, b: Tensor) -> Tensor:
    check_dtypes("add", (a, b))
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return make_op("add", a.data + b.data, (a, b), backward)


def _add_scalar(a: Tensor, s: float) -> Tensor:
    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g)

    return make_op("add_scalar", a.data + a.data.dtype.type(s), (a,), backward)


def _mul(a: Tensor, b: Tensor) -> Tensor:
    check_dtypes("mul", (a, b))
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(g * a.data)

    return make_op("mul", a.data * b.data, (a, b), backward)


def _scale(a: Tensor, s: float) -> Tensor:
    c = a.data.dtype.type(s)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g * c)

    return make_op("scale", a.data * c, (a,), backward)


# ---------------------------------------------------------------------------
# Binary tensor file format
#
# magic "SPAT", u8 version, u8 dtype code (1=f32, 2=f64), u8 rank,
# rank x u64 little-endian extents, raw little-endian values row-major.
# ---------------------------------------------------------------------------


def write_array(f: BinaryIO, arr: np.ndarray) -> None:
    # asarray(order="C") rather than ascontiguousarray: the latter promotes
    # rank-0 arrays to rank 1, which would corrupt the header.
    arr = np.asarray(arr, order="C")
    if arr.dtype not in _DTYPE_CODES:
        raise ValueError(f"unsupported dtype {arr.dtype}; use float32 or float64")
    f.write(_MAGIC)
    f.write(struct.pack("<BBB", _VERSION, _DTYPE_CODES[arr.dtype], arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    f.write(le.tobytes())


def read_array(f: BinaryIO) -> np.ndarray:
    magic = f.read(4)
    if magic != _MAGIC:
        raise ValueError(f"bad magic {magic!r}; not a tensor file")
    version, code, rank = struct.unpack("<BBB", f.read(3))
    if version != _VERSION:
        raise ValueError(f"unsupported tensor file version {version}")
    if code not in _CODE_DTYPES:
        raise ValueError(f"unknown dtype code {code}")
    dtype = _CODE_DTYPES[code]
    shape = struct.unpack(f"<{rank}Q", f.read(8 * rank))
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = f.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise ValueError("tensor file truncated")
    arr = np.frombuffer(payload, dtype=dtype.newbyteorder("<"), count=count)
    return arr.astype(dtype, copy=True).reshape(shape)


def save_tensor(path, arr) -> None:
    data = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
    with open(path, "wb") as f:
        write_array(f, data)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_array(f)


def parameters_of(named: Iterable[tuple[str, Tensor]]) -> list[Tensor]:
    return [t for _, t in named]
