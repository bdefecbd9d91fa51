"""Differentiable network operations on (batch, channels, spatial...) tensors."""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .tensor import Tensor, make_node


def out_extent(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _as5d(shape):
    # 2D layouts are carried as depth-1 volumes through the kernels
    return shape if len(shape) == 5 else (shape[0], shape[1], 1) + tuple(shape[2:])


def _geometry(kshape, stride, pad):
    k = tuple(kshape)
    if len(k) == 2:
        return (1,) + k, (1, stride, stride), (0, pad, pad)
    return k, (stride,) * 3, (pad,) * 3


def _check_rank(x, kernel, spatial_rank):
    rank = kernel.ndim - 2
    if spatial_rank is not None and spatial_rank != rank:
        raise ValueError(f"spatial_rank={spatial_rank} but kernel shape {kernel.shape} has rank {rank}")
    if rank not in (2, 3):
        raise ValueError(f"only 2D and 3D convolutions are supported, kernel shape {kernel.shape}")
    if x.ndim != rank + 2:
        raise ValueError(f"input shape {x.shape} does not match kernel shape {kernel.shape}")
    if x.dtype != kernel.dtype:
        raise TypeError(f"dtype mismatch: input {x.dtype}, kernel {kernel.dtype}")
    return rank


def convolve(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride=1, zero_pad=0,
             spatial_rank=None) -> Tensor:
    """Cross-correlate ``x`` (N, C, *S) with ``kernel`` (O, C, *k), plus bias."""
    _check_rank(x, kernel, spatial_rank)
    if kernel.shape[1] != x.shape[1]:
        raise ValueError(f"kernel shape {kernel.shape} expects {kernel.shape[1]} input channels, "
                         f"input shape {x.shape} has {x.shape[1]}")
    if stride < 1 or zero_pad < 0:
        raise ValueError(f"invalid stride={stride} / zero_pad={zero_pad}")
    ks = kernel.shape[2:]
    spatial = x.shape[2:]
    outs = tuple(out_extent(n, k, stride, zero_pad) for n, k in zip(spatial, ks))
    if min(outs) < 1:
        raise ValueError(f"non-positive output extent {outs} for input shape {x.shape}, "
                         f"kernel shape {kernel.shape}, stride {stride}, pad {zero_pad}")
    k3, s3, p3 = _geometry(ks, stride, zero_pad)
    N, O = x.shape[0], kernel.shape[0]
    x5 = x.data.reshape(_as5d(x.shape))
    cols = _kernels.vol2col(x5, k3, s3, p3)
    w2 = kernel.data.reshape(O, -1)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape((N, O) + outs)

    def backward(g):
        g = g.reshape(N, O, -1)
        gw = None
        if kernel.requires_grad:
            gw = sum(g[n] @ cols[n].T for n in range(N)).reshape(kernel.shape)
        gx = None
        if x.requires_grad:
            gx = _kernels.col2vol(np.matmul(w2.T, g), x5.shape, k3, s3, p3).reshape(x.shape)
        gb = g.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_node(out, parents, backward)


def transposed_convolve(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride=2, zero_pad=1,
                        output_pad=1, spatial_rank=None) -> Tensor:
    """Adjoint of the strided convolution sharing ``kernel`` (C_in, C_out, *k).

    Only the exact-doubling configuration is accepted.
    """
    _check_rank(x, kernel, spatial_rank)
    if kernel.shape[0] != x.shape[1]:
        raise ValueError(f"kernel shape {kernel.shape} expects {kernel.shape[0]} input channels, "
                         f"input shape {x.shape} has {x.shape[1]}")
    ks = kernel.shape[2:]
    outs = tuple((n - 1) * stride - 2 * zero_pad + k + output_pad for n, k in zip(x.shape[2:], ks))
    if outs != tuple(2 * n for n in x.shape[2:]):
        raise ValueError(f"transposed convolution must double every extent: input {x.shape[2:]} "
                         f"-> {outs} with kernel {ks}, stride {stride}, pad {zero_pad}, "
                         f"output_pad {output_pad}")
    k3, s3, p3 = _geometry(ks, stride, zero_pad)
    N, C, O = x.shape[0], kernel.shape[0], kernel.shape[1]
    out5 = _as5d((N, O) + outs)
    xf = x.data.reshape(N, C, -1)
    w2 = kernel.data.reshape(C, -1)
    out = _kernels.col2vol(np.matmul(w2.T, xf), out5, k3, s3, p3).reshape((N, O) + outs)
    if bias is not None:
        out += bias.data.reshape((1, O) + (1,) * len(outs))

    def backward(g):
        gcols = _kernels.vol2col(np.ascontiguousarray(g).reshape(out5), k3, s3, p3)
        gx = np.matmul(w2, gcols).reshape(x.shape) if x.requires_grad else None
        gw = None
        if kernel.requires_grad:
            gw = sum(xf[n] @ gcols[n].T for n in range(N)).reshape(kernel.shape)
        gb = None
        if bias is not None and bias.requires_grad:
            gb = g.reshape(N, O, -1).sum(axis=(0, 2))
        return gx, gw, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_node(out, parents, backward)


@dataclass
class RunningStats:
    """Per-channel running mean / variance tracked by a batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels, dtype=np.float32):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running: RunningStats | None = None,
               training=True, eps=BN_EPS, momentum=BN_MOMENTUM) -> Tensor:
    """Per-channel normalization over batch and spatial axes."""
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"gamma/beta shapes {gamma.shape}/{beta.shape} do not match {C} channels")
    if x.shape[0] == 0:
        raise ValueError("batch_norm needs a non-empty batch")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, C) + (1,) * (x.ndim - 2)
    if training:
        m = x.data.mean(axis=axes)
        centered = x.data - m.reshape(bshape)
        var = (centered * centered).mean(axis=axes)
        if running is not None:
            count = x.size // C
            unbiased = var * (count / (count - 1)) if count > 1 else var
            running.mean[...] = (1 - momentum) * running.mean + momentum * m
            running.var[...] = (1 - momentum) * running.var + momentum * unbiased
    else:
        if running is None:
            raise ValueError("inference-mode batch_norm needs running statistics")
        m, var = running.mean, running.var
        centered = x.data - m.reshape(bshape)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = centered * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(bshape)
            if training:
                M = x.size // C
                gx = (inv_std / M).reshape(bshape) * (
                    M * dxhat
                    - dxhat.sum(axis=axes).reshape(bshape)
                    - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape))
            else:
                gx = dxhat * inv_std.reshape(bshape)
        return gx, gg, gb

    return make_node(out, (x, gamma, beta), backward)


_branch_state = None  # (mode, masks, cursor) while recording or replaying


@contextlib.contextmanager
def pin_branches(masks=None):
    """Record (``masks is None``) or replay the branch masks of piecewise ops.

    Replaying makes every ReLU and loss branch follow the recorded pattern,
    i.e. evaluates the smooth piece the recorded point lies on.  Yields the
    list of recorded masks.
    """
    global _branch_state
    prev = _branch_state
    log = [] if masks is None else list(masks)
    _branch_state = ["record" if masks is None else "replay", log, 0]
    try:
        yield log
    finally:
        _branch_state = prev


def branch_mask(mask):
    """Hook for piecewise ops: returns the mask to apply."""
    st = _branch_state
    if st is None:
        return mask
    if st[0] == "record":
        st[1].append(mask)
        return mask
    pinned = st[1][st[2]]
    st[2] += 1
    if pinned.shape != mask.shape:
        raise RuntimeError(f"replayed branch mask {pinned.shape} does not match {mask.shape}")
    return pinned


def relu(x: Tensor) -> Tensor:
    mask = branch_mask(x.data > 0)
    return make_node(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def softmax_along(x: Tensor, axis: int) -> Tensor:
    """Numerically safe softmax over one axis."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_node(y, (x,), backward)


def concat(inputs, axis: int) -> Tensor:
    inputs = list(inputs)
    if not inputs:
        raise ValueError("concat needs at least one tensor")
    ref = inputs[0].shape
    ax = axis % len(ref)
    for t in inputs[1:]:
        if len(t.shape) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(ref, t.shape)) if i != ax):
            raise ValueError(f"cannot concatenate shapes {ref} and {t.shape} along axis {axis}")
    if len(inputs) == 1:
        return inputs[0]
    out = np.concatenate([t.data for t in inputs], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in inputs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return make_node(out, inputs, backward)


def split(x: Tensor, sizes, axis: int):
    """Inverse of concat: slice ``x`` into consecutive pieces of the given sizes."""
    ax = axis % x.ndim
    if sum(sizes) != x.shape[ax]:
        raise ValueError(f"sizes {sizes} do not add up to extent {x.shape[ax]}")
    pieces, start = [], 0
    for n in sizes:
        index = [slice(None)] * x.ndim
        index[ax] = slice(start, start + n)
        index = tuple(index)

        def backward(g, index=index):
            full = np.zeros_like(x.data)
            full[index] = g
            return (full,)

        pieces.append(make_node(x.data[index].copy(), (x,), backward))
        start += n
    return pieces


def _linear_resize_matrix(n_in, n_out, dtype):
    # half-pixel centers, edge clamped
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    return m.astype(dtype)


def resize_bilinear(x: Tensor, height: int, width: int) -> Tensor:
    """Bilinear resampling of the last two axes of an (N, C, H, W) tensor."""
    mh = _linear_resize_matrix(x.shape[2], height, x.dtype)
    mw = _linear_resize_matrix(x.shape[3], width, x.dtype)
    out = mh @ (x.data @ mw.T)

    def backward(g):
        return (mh.T @ (g @ mw),)

    return make_node(out, (x,), backward)
