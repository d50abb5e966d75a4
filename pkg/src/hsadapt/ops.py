"""Differentiable network operations.

All layers a 3-channel convolutional classifier and its input adaptors need:
im2col convolution, batch normalization, ReLU, max pooling, dense layers,
pooled classification heads, the two losses, channel concatenation, and the
gram/spectral-norm pair used by the view-diversity regularizer.

Convolution is implemented as an explicit patch-gather matrix multiply.
Performance is secondary to determinism: given identical inputs, dtype and op
order, every forward here is bitwise reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, check_dtypes, make_op


class PowerIterationError(RuntimeError):
    """Power iteration failed to converge within its iteration budget."""


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2d convolution (cross-correlation), NCHW layout.

    x: [N, C, H, W]; weight: [F, C, kh, kw]; bias: [F].
    Output spatial extent is floor((H + 2*padding - kh) / stride) + 1.
    """
    check_dtypes("conv2d", (x, weight, bias))
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be >= 0, got {padding}")
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if c != cw:
        raise ValueError(f"conv2d: input has {c} channels but weight expects {cw}")
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    if h_out <= 0 or w_out <= 0:
        raise ValueError(
            f"conv2d: non-positive output extent {h_out}x{w_out} "
            f"for input {h}x{w}, kernel {kh}x{kw}, stride {stride}, padding {padding}"
        )

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # [N, C, H', W', kh, kw] patch view, then flatten to an im2col matrix
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * h_out * w_out, c * kh * kw
    )
    wmat = weight.data.reshape(f, c * kh * kw)
    out_mat = cols @ wmat.T + bias.data
    out_data = out_mat.reshape(n, h_out, w_out, f).transpose(0, 3, 1, 2)

    def backward(g: np.ndarray) -> None:
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * h_out * w_out, f)
        if bias.requires_grad:
            bias.accumulate_grad(gmat.sum(axis=0))
        if weight.requires_grad:
            weight.accumulate_grad((gmat.T @ cols).reshape(weight.shape))
        if x.requires_grad:
            # accumulate in NHWC (contiguous destination blocks), transpose once
            gcols = (gmat @ wmat).reshape(n, h_out, w_out, c, kh, kw)
            gnhwc = np.zeros(
                (n, h + 2 * padding, w + 2 * padding, c), dtype=x.data.dtype
            )
            for i in range(kh):
                for j in range(kw):
                    gnhwc[:, i : i + stride * h_out : stride, j : j + stride * w_out : stride, :] += gcols[
                        :, :, :, :, i, j
                    ]
            gxp = gnhwc.transpose(0, 3, 1, 2)
            if padding:
                gxp = gxp[:, :, padding : padding + h, padding : padding + w]
            x.accumulate_grad(np.ascontiguousarray(gxp))

    return make_op("conv2d", np.ascontiguousarray(out_data), (x, weight, bias), backward)


@dataclass
class RunningStats:
    """Per-channel running mean/variance updated by train-mode batchnorm."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running: RunningStats,
    mode: str,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    Train mode normalizes by batch statistics and updates ``running`` in
    place; eval mode normalizes by the running statistics.  The eps floor
    keeps zero-variance batches finite.
    """
    check_dtypes("batchnorm2d", (x, gamma, beta))
    if mode not in ("train", "eval"):
        raise ValueError(f"batchnorm2d: mode must be 'train' or 'eval', got {mode!r}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(
            f"batchnorm2d: gamma/beta shapes {gamma.shape}/{beta.shape} "
            f"do not match {c} channels"
        )
    dt = x.data.dtype
    axes = (0, 2, 3)

    if mode == "train":
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running.mean = ((1.0 - momentum) * running.mean + momentum * mu).astype(dt)
        running.var = ((1.0 - momentum) * running.var + momentum * var).astype(dt)
    else:
        mu = running.mean.astype(dt)
        var = running.var.astype(dt)

    inv = 1.0 / np.sqrt(var + dt.type(eps))
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out_data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    m = n * h * w

    def backward(g: np.ndarray) -> None:
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=axes))
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=axes))
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None, None]
            if mode == "train":
                term = (
                    gxhat
                    - gxhat.mean(axis=axes)[None, :, None, None]
                    - xhat * (gxhat * xhat).sum(axis=axes)[None, :, None, None] / m
                )
                x.accumulate_grad(term * inv[None, :, None, None])
            else:
                x.accumulate_grad(gxhat * inv[None, :, None, None])

    return make_op("batchnorm2d", out_data, (x, gamma, beta), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(g * mask)

    return make_op("relu", x.data * mask, (x,), backward)


def maxpool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    """k x k max pooling; gradient routes to the argmax of each window,
    ties broken by lowest linear index within the window."""
    if stride is None:
        stride = k
    n, c, h, w = x.shape
    if k > h or k > w:
        raise ValueError(f"maxpool2d: window {k}x{k} exceeds spatial extent {h}x{w}")
    h_out = (h - k) // stride + 1
    w_out = (w - k) // stride + 1
    windows = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = windows.reshape(n, c, h_out, w_out, k * k)
    idx = flat.argmax(axis=-1)
    out_data = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g: np.ndarray) -> None:
        if not x.requires_grad:
            return
        gx = np.zeros_like(x.data)
        rows = (np.arange(h_out) * stride)[None, None, :, None] + idx // k
        cols = (np.arange(w_out) * stride)[None, None, None, :] + idx % k
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        np.add.at(gx, (ni, ci, rows, cols), g)
        x.accumulate_grad(gx)

    return make_op("maxpool2d", np.ascontiguousarray(out_data), (x,), backward)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine layer: x [N, D] @ weight [D, M] + bias [M]."""
    check_dtypes("dense", (x, weight, bias))
    if x.shape[1] != weight.shape[0]:
        raise ValueError(f"dense: input width {x.shape[1]} != weight rows {weight.shape[0]}")
    out_data = x.data @ weight.data + bias.data

    def backward(g: np.ndarray) -> None:
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=0))
        if weight.requires_grad:
            weight.accumulate_grad(x.data.T @ g)
        if x.requires_grad:
            x.accumulate_grad(g @ weight.data.T)

    return make_op("dense", out_data, (x, weight, bias), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, C] spatial mean."""
    n, c, h, w = x.shape
    out_data = x.data.mean(axis=(2, 3))

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(
                np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy()
            )

    return make_op("global_avg_pool", out_data, (x,), backward)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean multi-class cross-entropy, stabilized by max subtraction."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k}): {labels.min()}..{labels.max()}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sez = ez.sum(axis=1)
    log_probs = z - np.log(sez)[:, None]
    loss = -log_probs[np.arange(n), labels].mean()
    softmax = ez / sez[:, None]

    def backward(g: np.ndarray) -> None:
        if logits.requires_grad:
            grad = softmax.copy()
            grad[np.arange(n), labels] -= 1.0
            logits.accumulate_grad(grad * (g / n))

    return make_op(
        "softmax_cross_entropy",
        np.asarray(loss, dtype=logits.data.dtype),
        (logits,),
        backward,
    )


def mse(pred: Tensor, target: Tensor) -> Tensor:
    check_dtypes("mse", (pred, target))
    if pred.shape != target.shape:
        raise ValueError(f"mse: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    out = np.asarray((diff * diff).mean(), dtype=pred.data.dtype)

    def backward(g: np.ndarray) -> None:
        scale = g * 2.0 / diff.size
        if pred.requires_grad:
            pred.accumulate_grad(diff * scale)
        if target.requires_grad:
            target.accumulate_grad(-diff * scale)

    return make_op("mse", out, (pred, target), backward)


def concat_channels(tensors: list[Tensor]) -> Tensor:
    """Concatenate [N, Ci, H, W] tensors along the channel axis."""
    if not tensors:
        raise ValueError("concat_channels: empty input list")
    check_dtypes("concat_channels", tensors)
    widths = [t.shape[1] for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=1)

    def backward(g: np.ndarray) -> None:
        start = 0
        for t, width in zip(tensors, widths):
            if t.requires_grad:
                t.accumulate_grad(g[:, start : start + width])
            start += width

    return make_op("concat_channels", out_data, tuple(tensors), backward)


def select_image(x: Tensor, i: int) -> Tensor:
    """Pick element i along the leading (batch) axis."""
    out_data = x.data[i].copy()

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[i] = g
            x.accumulate_grad(gx)

    return make_op("select_image", out_data, (x,), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out_data = x.data.reshape(shape).copy()

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(g.reshape(x.shape))

    return make_op("reshape", out_data, (x,), backward)


def gram(v: Tensor) -> Tensor:
    """G = v v^T for a [rows, cols] matrix; symmetric positive semidefinite."""
    if v.data.ndim != 2:
        raise ValueError(f"gram: expected a 2d matrix, got shape {v.shape}")
    out_data = v.data @ v.data.T

    def backward(g: np.ndarray) -> None:
        if v.requires_grad:
            v.accumulate_grad((g + g.T) @ v.data)

    return make_op("gram", out_data, (v,), backward)


def spectral_norm(g_mat: Tensor, max_iter: int = 1000, tol: float = 1e-14) -> Tensor:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration.

    The eigenvalue estimate is the norm-growth ratio ||Gx|| / ||x||, which is
    exact for the identity.  Iteration stops when the relative change drops
    below the dtype-adjusted ``tol``, or when the eigenpair residual
    ||Gx - est x|| certifies the estimate: the residual bounds the distance
    to a true eigenvalue, which covers nearly-repeated top eigenvalues
    where the change criterion converges geometrically slowly.  In float64
    the residual gate is 1e-9 (test-grade accuracy); in float32 it is 1e-3,
    enough for a training-loss term.  Exhausting ``max_iter`` raises
    :class:`PowerIterationError` with the final residual.  The gradient is
    the dominant eigenvector outer product u u^T; with a repeated top
    eigenvalue the fixed point reached by the iteration is used.
    """
    gd = g_mat.data
    if gd.ndim != 2 or gd.shape[0] != gd.shape[1]:
        raise ValueError(f"spectral_norm: expected a square matrix, got {g_mat.shape}")
    r = gd.shape[0]
    eps = np.finfo(gd.dtype).eps
    dtol = max(tol, 8.0 * eps)
    rtol = 1e-9 if eps < 1e-12 else 1e-3
    rng = np.random.default_rng(0)
    x = rng.standard_normal(r).astype(gd.dtype)
    x /= np.linalg.norm(x)
    est = None
    u = x
    residual = np.inf
    for _ in range(max_iter):
        y = gd @ x
        ny = np.linalg.norm(y)
        if ny == 0.0:
            est = gd.dtype.type(0.0)
            u = x
            break
        new = ny / np.linalg.norm(x)
        residual = float(np.linalg.norm(y - new * x))
        u = y / ny
        if residual <= rtol * max(new, 1e-30):
            est = new
            break
        if est is not None and abs(new - est) <= dtol * max(abs(new), 1e-300):
            est = new
            break
        est = new
        x = u
    else:
        raise PowerIterationError(
            f"power iteration did not converge in {max_iter} iterations "
            f"(residual {residual:.3e})"
        )

    outer = np.outer(u, u)

    def backward(g: np.ndarray) -> None:
        if g_mat.requires_grad:
            g_mat.accumulate_grad(np.asarray(g).item() * outer)

    return make_op("spectral_norm", np.asarray(est, dtype=gd.dtype), (g_mat,), backward)


def stack_max(tensors: list[Tensor]) -> Tensor:
    """Elementwise max over same-shape tensors; gradient routes to the
    winning tensor per element, ties to the lowest list index."""
    if not tensors:
        raise ValueError("stack_max: empty input list")
    check_dtypes("stack_max", tensors)
    stacked = np.stack([t.data for t in tensors], axis=0)
    idx = stacked.argmax(axis=0)
    out_data = np.take_along_axis(stacked, idx[None], axis=0)[0]

    def backward(g: np.ndarray) -> None:
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t.accumulate_grad(g * (idx == i))

    return make_op("stack_max", np.ascontiguousarray(out_data), tuple(tensors), backward)


def stack_mean(tensors: list[Tensor]) -> Tensor:
    """Elementwise mean over same-shape tensors."""
    if not tensors:
        raise ValueError("stack_mean: empty input list")
    check_dtypes("stack_mean", tensors)
    out_data = np.mean([t.data for t in tensors], axis=0).astype(tensors[0].data.dtype)
    inv = 1.0 / len(tensors)

    def backward(g: np.ndarray) -> None:
        for t in tensors:
            if t.requires_grad:
                t.accumulate_grad(g * inv)

    return make_op("stack_mean", out_data, tuple(tensors), backward)


def add_n(tensors: list[Tensor]) -> Tensor:
    """Sum of same-shape tensors."""
    if not tensors:
        raise ValueError("add_n: empty input list")
    check_dtypes("add_n", tensors)
    out_data = tensors[0].data.copy()
    for t in tensors[1:]:
        out_data = out_data + t.data

    def backward(g: np.ndarray) -> None:
        for t in tensors:
            if t.requires_grad:
                t.accumulate_grad(g)

    return make_op("add_n", out_data, tuple(tensors), backward)
