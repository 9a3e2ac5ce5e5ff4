"""Differentiable operators.

Every op takes and returns :class:`Tensor` and registers a backward closure.
Broadcasting is limited to bias-style patterns: the second operand's shape
must equal the first's, be a suffix of it, or be a single element.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError
from .tensor import Tensor, as_tensor, make_result


def _check_bias_shape(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or (b.size == 1 and len(sb) <= len(sa)):
        return
    if len(sb) <= len(sa) and sa[len(sa) - len(sb):] == sb:
        return
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_bias_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return make_result(
        a.data + b.data,
        (a, b),
        lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)),
        "add",
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_bias_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return make_result(
        a.data - b.data,
        (a, b),
        lambda g: (_reduce_to(g, sa), -_reduce_to(g, sb)),
        "sub",
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_bias_shape("mul", a, b)
    ad, bd = a.data, b.data
    return make_result(
        ad * bd,
        (a, b),
        lambda g: (
            _reduce_to(g * bd, ad.shape) if a.requires_grad else None,
            _reduce_to(g * ad, bd.shape) if b.requires_grad else None,
        ),
        "mul",
    )


def scale(a: Tensor, c: float) -> Tensor:
    return make_result(a.data * c, (a,), lambda g: (g * c,), "scale")


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return make_result(
        np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum"
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    out = a.data.reshape(shape)
    return make_result(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (g.transpose(inv),),
        "transpose",
    )


def select(a: Tensor, axis: int, index: int) -> Tensor:
    """Take one slice along ``axis`` (the axis is dropped)."""
    axis = axis % a.ndim
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return make_result(np.take(a.data, index, axis=axis), (a,), bw, "select")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    nd = tensors[0].ndim
    axis = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(
            t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != axis
        ):
            raise ShapeError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * nd
            sl[axis] = slice(lo, hi)
            out.append(g[tuple(sl)])
        return out

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 3-D operands are batched over the leading axis."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")
    if ad.ndim == 3 and bd.ndim == 3 and ad.shape[0] != bd.shape[0]:
        raise ShapeError(f"matmul: batch mismatch {ad.shape} and {bd.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _reduce_to(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _reduce_to(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return make_result(ad @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: ``x @ w + b`` with ``w`` of shape (in, out)."""
    if x.shape[-1] != w.shape[0] or w.ndim != 2:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} does not match {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        out = out + b.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g @ wd.T) if x.requires_grad else None
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out, parents, bw, "linear")


def pointwise_conv1d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Kernel-size-1 convolution over points: (B, N, C_in) -> (B, N, C_out).

    A 1-wide kernel is a per-point affine map shared across points, so this is
    ``linear`` applied to the channel axis.
    """
    if x.ndim != 3:
        raise ShapeError(f"pointwise_conv1d: expected (B, N, C) input, got {x.shape}")
    out = linear(x, w, b)
    out.op = "pointwise_conv1d"
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input, (C_out, C_in, k, k) kernel."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    k = w.shape[2]
    xd, wd = x.data, w.data
    B, C, H, W = xd.shape
    Hp, Wp = H + 2 * pad, W + 2 * pad
    if Hp < k or Wp < k:
        raise ShapeError(f"conv2d: input {x.shape} smaller than kernel {w.shape}")
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    Ho = (Hp - k) // stride + 1
    Wo = (Wp - k) // stride + 1
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.einsum("bchwij,ocij->bohw", cols, wd, optimize=True)
    if b is not None:
        out += b.data[None, :, None, None]

    def bw(g):
        gx = gw = None
        if w.requires_grad:
            gw = np.empty_like(wd)
            g2 = g.reshape(B, -1, Ho * Wo)
            for i in range(k):
                for j in range(k):
                    xs = np.ascontiguousarray(xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride])
                    gw[:, :, i, j] = np.matmul(g2, xs.reshape(B, C, -1).transpose(0, 2, 1)).sum(axis=0)
        if x.requires_grad:
            gx = _conv2d_input_grad(g, wd, (B, C, H, W), stride, pad)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out, parents, bw, "conv2d")


def _conv2d_input_grad(g: np.ndarray, wd: np.ndarray, xshape, stride: int, pad: int) -> np.ndarray:
    B, C, H, W = xshape
    k = wd.shape[2]
    Ho, Wo = g.shape[2], g.shape[3]
    Hp, Wp = H + 2 * pad, W + 2 * pad
    if stride == 1:
        # full correlation of the output gradient with the flipped kernel
        gpad = np.pad(g, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
        cols = sliding_window_view(gpad, (k, k), axis=(2, 3))
        gxp = np.einsum("bohwij,ocij->bchw", cols, wd[:, :, ::-1, ::-1], optimize=True)
    else:
        gxp = np.zeros((B, C, Hp, Wp))
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += np.einsum(
                    "bohw,oc->bchw", g, wd[:, :, i, j], optimize=True
                )
    return gxp[:, :, pad:pad + H, pad:pad + W]


# ---------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``.

    ``mask`` (broadcastable boolean array) excludes entries: they get weight
    exactly 0 and no gradient, as if their logit were minus infinity.
    """
    xd = x.data
    if mask is None:
        keep = np.ones(xd.shape, dtype=bool)
    else:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        if not np.all(keep.any(axis=axis)):
            raise ShapeError("softmax: mask excludes every entry along the axis")
    shifted = np.where(keep, xd, -np.inf)
    shifted = shifted - shifted.max(axis=axis, keepdims=True)
    e = np.where(keep, np.exp(np.where(keep, shifted, 0.0)), 0.0)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return make_result(out, (x,), bw, "softmax")


# ---------------------------------------------------------------------------
# pooling and reductions


def maxpool2d(x: Tensor, k: int = 2, stride: int | None = None) -> Tensor:
    stride = stride or k
    xd = x.data
    B, C, H, W = xd.shape
    if H < k or W < k:
        raise ShapeError(f"maxpool2d: input {x.shape} smaller than window {k}")
    win = sliding_window_view(xd, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2], win.shape[3]
    flat = win.reshape(B, C, Ho, Wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros_like(xd)
        di, dj = np.divmod(arg, k)
        bi, ci, hi, wi = np.indices(arg.shape)
        np.add.at(gx, (bi, ci, hi * stride + di, wi * stride + dj), g)
        return (gx,)

    return make_result(out, (x,), bw, "maxpool2d")


def max_over_points(x: Tensor) -> Tensor:
    """Max over the point axis: (B, N, C) -> (B, C).

    Ties route the gradient to the first maximal point so the result does not
    depend on how many duplicates a padded cloud carries.
    """
    xd = x.data
    if xd.ndim != 3 or xd.shape[1] == 0:
        raise ShapeError(f"max_over_points: expected non-empty (B, N, C), got {x.shape}")
    arg = xd.argmax(axis=1)
    out = xd.max(axis=1)

    def bw(g):
        gx = np.zeros_like(xd)
        b_idx, c_idx = np.indices(arg.shape)
        gx[b_idx, arg, c_idx] = g
        return (gx,)

    return make_result(out, (x,), bw, "max_over_points")


def mean_over_axis(x: Tensor, axis: int | tuple[int, ...]) -> Tensor:
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % x.ndim for a in axes)
    count = int(np.prod([x.shape[a] for a in axes]))
    shape = x.shape

    def bw(g):
        g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)

    return make_result(x.data.mean(axis=axes), (x,), bw, "mean")


# ---------------------------------------------------------------------------
# normalization


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-8
    num_batches: int = field(default=0)

    @classmethod
    def fresh(cls, channels: int) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels))


def _channel_view(x: np.ndarray, ax: int) -> np.ndarray:
    """View ``x`` as (A, C, K) with the channel axis in the middle."""
    shape = x.shape
    a = int(np.prod(shape[:ax], dtype=np.int64))
    return x.reshape(a, shape[ax], -1)


def _colsum(v: np.ndarray) -> np.ndarray:
    # v is (A, C, K); reduce A and K, contiguous-friendly
    if v.shape[2] == 1:
        return np.ones(v.shape[0]) @ v[:, :, 0]
    return v.sum(axis=2).sum(axis=0)


def _coldot(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    if u.shape[2] == 1:
        return np.einsum("ac,ac->c", u[:, :, 0], v[:, :, 0])
    return np.einsum("ack,ack->c", u, v)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    train: bool,
    channel_axis: int = 1,
) -> Tensor:
    """Normalize per channel over every other axis.

    Train mode uses batch statistics and updates the running estimates
    (unbiased variance, momentum 0.1); eval mode uses the running estimates.
    """
    xd = x.data
    ax = channel_axis % xd.ndim
    C = xd.shape[ax]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batchnorm: parameter shape {gamma.shape} vs channels {C}")
    shape = xd.shape
    v = _channel_view(xd, ax)
    m = v.shape[0] * v.shape[2]
    gam = gamma.data[None, :, None]

    if train:
        if shape[0] < 2:
            raise ShapeError(f"batchnorm: train mode needs batch >= 2, got input {x.shape}")
        mean = _colsum(v) / m
        xhat = v - mean[None, :, None]
        var = _coldot(xhat, xhat) / m
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat *= inv[None, :, None]
        mom = state.momentum
        state.running_mean = (1 - mom) * state.running_mean + mom * mean
        state.running_var = (1 - mom) * state.running_var + mom * var * (m / max(m - 1, 1))
        state.num_batches += 1

        def bw(g):
            gv = _channel_view(g, ax)
            sum_g = _colsum(gv)
            sum_gx = _coldot(gv, xhat)
            gx = None
            if x.requires_grad:
                gx = gv - (sum_g / m)[None, :, None]
                gx -= xhat * (sum_gx / m)[None, :, None]
                gx *= (gamma.data * inv)[None, :, None]
                gx = gx.reshape(shape)
            return gx, sum_gx, sum_g

    else:
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (v - state.running_mean[None, :, None]) * inv[None, :, None]

        def bw(g):
            gv = _channel_view(g, ax)
            gx = (gv * (gamma.data * inv)[None, :, None]).reshape(shape) if x.requires_grad else None
            return gx, _coldot(gv, xhat), _colsum(gv)

    out = xhat * gam
    out += beta.data[None, :, None]
    return make_result(out.reshape(shape), (x, gamma, beta), bw, "batchnorm")


# ---------------------------------------------------------------------------
# losses


def mse_loss(pred: Tensor, target: Tensor | np.ndarray) -> Tensor:
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: incompatible shapes {pred.shape} and {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    return make_result(
        np.asarray((diff * diff).mean()),
        (pred, target),
        lambda g: (g * 2.0 * diff / n, -g * 2.0 * diff / n),
        "mse_loss",
    )
