"""Differentiable primitives.

Every op takes and returns :class:`Tensor` objects and, when a tape is active
and an input requires gradients, records a closure that maps the output
gradient to input gradients. Convolutions are cross-correlations over the
three trailing axes of ``(N, C, D, H, W)`` arrays.
"""

from __future__ import annotations

import itertools
from typing import Mapping

import numpy as np

from .rng import RngStream
from .tensor import Tensor, as_tensor, record

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _check_same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape and a.ndim and b.ndim:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    _check_same_shape(ad, bd, "add")
    out = ad + bd
    ta = a if isinstance(a, Tensor) else None
    tb = b if isinstance(b, Tensor) else None

    def backward(g):
        return (_unbroadcast(g, ad.shape), _unbroadcast(g, bd.shape))

    return record("add", (ta, tb), out, backward)


def sub(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    _check_same_shape(ad, bd, "sub")
    out = ad - bd
    ta = a if isinstance(a, Tensor) else None
    tb = b if isinstance(b, Tensor) else None

    def backward(g):
        return (_unbroadcast(g, ad.shape), -_unbroadcast(g, bd.shape))

    return record("sub", (ta, tb), out, backward)


def mul(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    _check_same_shape(ad, bd, "mul")
    out = ad * bd
    ta = a if isinstance(a, Tensor) else None
    tb = b if isinstance(b, Tensor) else None

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))

    return record("mul", (ta, tb), out, backward)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    # only scalar broadcasting is supported
    if g.shape == tuple(shape):
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return record("exp", (x,), out, lambda g: (g * out,))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; gradient passes only where the input is inside."""
    d = x.data
    out = np.clip(d, lo, hi)
    inside = (d >= lo) & (d <= hi)
    return record("clamp", (x,), out, lambda g: (g * inside,))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return record("sum", (x,), out, lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    out = np.asarray(x.data.mean(), dtype=x.dtype)
    return record("mean", (x,), out, lambda g: (np.full(shape, g / n, dtype=x.dtype),))


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    out = x.data.reshape(shape)
    return record("reshape", (x,), out, lambda g: (g.reshape(src),))


def index(x: Tensor, idx) -> Tensor:
    """Basic (slice/int) indexing."""
    src, dtype = x.shape, x.dtype
    out = x.data[idx]

    def backward(g):
        full = np.zeros(src, dtype=dtype)
        full[idx] = g
        return (full,)

    return record("index", (x,), np.ascontiguousarray(out), backward)


# ---------------------------------------------------------------- activations

def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return record("relu", (x,), np.where(pos, x.data, 0).astype(x.dtype), lambda g: (g * pos,))


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    pos = x.data > 0
    slope = np.where(pos, 1.0, alpha).astype(x.dtype)
    return record("leaky_relu", (x,), x.data * slope, lambda g: (g * slope,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # numerically stable both sides
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return record("sigmoid", (x,), out, lambda g: (g * out * (1 - out),))


def activation(x: Tensor, kind: str, alpha: float = 0.2) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, alpha)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def dropout(x: Tensor, rate: float, rng: RngStream | None, train: bool) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-rate)`` in train mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an RngStream")
    scale = (rng.keep_mask(x.shape, rate) / (1.0 - rate)).astype(x.dtype)
    return record("dropout", (x,), x.data * scale, lambda g: (g * scale,))


# ---------------------------------------------------------------- dense

def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` for ``x`` of shape (N, K) and ``weight`` (K, M)."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ValueError(f"affine expects 2-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ValueError(f"affine: input features {x.shape[1]} != weight rows {weight.shape[0]}")
    if bias.shape != (weight.shape[1],):
        raise ValueError(f"affine: bias shape {bias.shape} != ({weight.shape[1]},)")
    xd, wd = x.data, weight.data
    out = xd @ wd + bias.data

    def backward(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return record("affine", (x, weight, bias), out, backward)


# ---------------------------------------------------------------- pooling

def avg_pool3d(x: Tensor, block: int) -> Tensor:
    """Mean over non-overlapping ``block**3`` cubes of the three trailing axes."""
    if block < 1:
        raise ValueError(f"block must be >= 1, got {block}")
    *lead, d, h, w = x.shape
    for axis, n in zip("DHW", (d, h, w)):
        if n % block:
            raise ValueError(f"avg_pool3d: axis {axis} extent {n} not divisible by block {block}")
    if block == 1:
        return x
    b = block
    nl = len(lead)
    view = x.data.reshape(*lead, d // b, b, h // b, b, w // b, b)
    out = view.mean(axis=(nl + 1, nl + 3, nl + 5))

    def backward(g):
        return (_repeat3(g, b) / (b ** 3),)

    return record("avg_pool3d", (x,), out.astype(x.dtype), backward)


def _repeat3(a: np.ndarray, f: int) -> np.ndarray:
    return a.repeat(f, axis=-3).repeat(f, axis=-2).repeat(f, axis=-1)


def _block_sum(a: np.ndarray, f: int) -> np.ndarray:
    *lead, d, h, w = a.shape
    nl = len(lead)
    return a.reshape(*lead, d // f, f, h // f, f, w // f, f).sum(axis=(nl + 1, nl + 3, nl + 5))


def upsample3d_nearest(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    return record("upsample3d_nearest", (x,), _repeat3(x.data, factor),
                  lambda g: (_block_sum(g, factor),))


# ---------------------------------------------------------------- convolution

def _conv_out_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _check_conv(x_shape, w_shape, stride, padding, op):
    if len(x_shape) != 5:
        raise ValueError(f"{op}: input must be (N, C, D, H, W), got {x_shape}")
    if len(w_shape) != 5:
        raise ValueError(f"{op}: kernel must be (F, C, kd, kh, kw), got {w_shape}")
    if stride < 1:
        raise ValueError(f"{op}: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"{op}: padding must be >= 0, got {padding}")


def _offsets(kshape):
    return itertools.product(range(kshape[0]), range(kshape[1]), range(kshape[2]))


def _window(i, j, l, out_sp, s):
    return (slice(None), slice(None),
            slice(i, i + s * (out_sp[0] - 1) + 1, s),
            slice(j, j + s * (out_sp[1] - 1) + 1, s),
            slice(l, l + s * (out_sp[2] - 1) + 1, s))


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))


def _patches(xp: np.ndarray, s: int, kshape, out_sp) -> np.ndarray:
    """Strided view (N, C, *out_sp, *kshape) of every kernel window of ``xp``."""
    win = np.lib.stride_tricks.sliding_window_view(xp, tuple(kshape), axis=(2, 3, 4))
    return win[:, :, :s * (out_sp[0] - 1) + 1:s, :s * (out_sp[1] - 1) + 1:s, :s * (out_sp[2] - 1) + 1:s]


def _correlate(xp: np.ndarray, w: np.ndarray, s: int, out_sp) -> np.ndarray:
    """Channel-contracting correlation of padded ``xp`` with ``w``: (N,F,*out_sp)."""
    cols = _patches(xp, s, w.shape[2:], out_sp)
    out = np.tensordot(cols, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    return np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))


def _correlate_adjoint(g: np.ndarray, w: np.ndarray, s: int, p: int, in_sp) -> np.ndarray:
    """Adjoint of :func:`_correlate` followed by padding removal: (N,C,*in_sp)."""
    n, c = g.shape[0], w.shape[1]
    out_sp = g.shape[2:]
    padded = tuple(e + 2 * p for e in in_sp)
    # (C, kd, kh, kw, N, *out_sp), then scatter each kernel tap back (col2im)
    cols = np.tensordot(w, g, axes=(0, 1))
    acc = np.zeros((c, n) + padded, dtype=np.result_type(g, w))
    for i, j, l in _offsets(w.shape[2:]):
        acc[_window(i, j, l, out_sp, s)] += cols[:, i, j, l]
    acc = acc.transpose(1, 0, 2, 3, 4)
    if p:
        acc = acc[:, :, p:p + in_sp[0], p:p + in_sp[1], p:p + in_sp[2]]
    return np.ascontiguousarray(acc)


def _kernel_grad(xp: np.ndarray, g: np.ndarray, s: int, kshape) -> np.ndarray:
    """Gradient of ``<_correlate(xp, w), g>`` with respect to ``w``."""
    cols = _patches(xp, s, kshape[2:], g.shape[2:])
    gw = np.tensordot(g, cols, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    return gw.astype(np.result_type(xp, g), copy=False)


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """3-D cross-correlation mapping C input channels to F output channels."""
    _check_conv(x.shape, kernel.shape, stride, padding, "conv3d")
    n, c, *sp = x.shape
    f, kc, *ks = kernel.shape
    if kc != c:
        raise ValueError(f"conv3d: axis C mismatch, input has {c} channels, kernel expects {kc}")
    for axis, e, k in zip("DHW", sp, ks):
        if k > e + 2 * padding:
            raise ValueError(f"conv3d: axis {axis} kernel extent {k} exceeds padded input {e + 2 * padding}")
    if bias is not None and bias.shape != (f,):
        raise ValueError(f"conv3d: bias shape {bias.shape} != ({f},)")
    out_sp = tuple(_conv_out_extent(e, k, stride, padding) for e, k in zip(sp, ks))
    xp = _pad(x.data, padding)
    out = _correlate(xp, kernel.data, stride, out_sp)
    if bias is not None:
        out = out + bias.data.reshape(1, f, 1, 1, 1)
    wd = kernel.data

    def backward(g):
        gx = _correlate_adjoint(g, wd, stride, padding, sp)
        gw = _kernel_grad(xp, g, stride, wd.shape)
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        return gx, gw, gb

    return record("conv3d", (x, kernel, bias), out, backward)


def conv_transpose_extent(n: int, k: int, stride: int, padding: int, output_padding: int = 0) -> int:
    return (n - 1) * stride - 2 * padding + k + output_padding


def conv3d_transpose(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
                     padding: int = 0, output_padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv3d` with the same kernel, mapping F channels back to C.

    ``kernel`` has shape (F, C, kd, kh, kw) exactly as in the forward conv; the
    input carries F channels and the output C channels plus ``bias`` (C,).
    ``output_padding`` (< stride) restores trailing rows that a strided
    forward conv skipped, so the map is the adjoint for that input extent.
    """
    if not 0 <= output_padding < max(stride, 1):
        raise ValueError(f"conv3d_transpose: output_padding must be in [0, stride), got {output_padding}")
    _check_conv(x.shape, kernel.shape, stride, padding, "conv3d_transpose")
    n, f, *sp = x.shape
    kf, c, *ks = kernel.shape
    if kf != f:
        raise ValueError(f"conv3d_transpose: axis C mismatch, input has {f} channels, kernel expects {kf}")
    out_sp = tuple(conv_transpose_extent(e, k, stride, padding, output_padding) for e, k in zip(sp, ks))
    for axis, e in zip("DHW", out_sp):
        if e < 1:
            raise ValueError(f"conv3d_transpose: axis {axis} output extent {e} < 1")
    if bias is not None and bias.shape != (c,):
        raise ValueError(f"conv3d_transpose: bias shape {bias.shape} != ({c},)")
    xd, wd = x.data, kernel.data
    out = _correlate_adjoint(xd, wd, stride, padding, out_sp)
    if bias is not None:
        out = out + bias.data.reshape(1, c, 1, 1, 1)

    def backward(g):
        gp = _pad(g, padding)
        if output_padding:
            gp = gp[:, :, :gp.shape[2] - output_padding, :gp.shape[3] - output_padding,
                    :gp.shape[4] - output_padding]
        gx = _correlate(gp, wd, stride, sp)
        gw = _kernel_grad(gp, xd, stride, wd.shape)
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        return gx, gw, gb

    return record("conv3d_transpose", (x, kernel, bias), out, backward)


# ---------------------------------------------------------------- normalization

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running: Mapping[str, np.ndarray] | None = None,
               train: bool = True, eps: float = BN_EPS, momentum: float = BN_MOMENTUM,
               update_running: bool = True) -> Tensor:
    """Per-channel normalization over every axis except axis 1.

    In train mode batch statistics are used and, if ``update_running``, the
    ``running`` buffers ``mean``/``var`` are blended in place as
    ``momentum * old + (1 - momentum) * batch`` (unbiased batch variance).
    Eval mode normalizes with the running buffers.
    """
    if x.ndim < 2:
        raise ValueError(f"batch_norm expects (N, C, ...), got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm: gamma/beta must be ({c},), got {gamma.shape}/{beta.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    xd = x.data
    gd = gamma.data.reshape(bshape)

    if train:
        if x.shape[0] < 2:
            raise ValueError("batch_norm in train mode needs a batch of at least 2")
        m = xd.size // c
        mu = xd.mean(axis=axes, keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        if running is not None and update_running:
            running["mean"][...] = momentum * running["mean"] + (1 - momentum) * mu.reshape(c)
            running["var"][...] = momentum * running["var"] + (1 - momentum) * var.reshape(c) * (m / (m - 1))

        def backward(g):
            dxhat = g * gd
            s1 = dxhat.sum(axis=axes, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            gx = inv * (dxhat - s1 / m - xhat * (s2 / m))
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    else:
        if running is None:
            raise ValueError("batch_norm in eval mode needs running statistics")
        inv = (1.0 / np.sqrt(running["var"] + eps)).reshape(bshape).astype(xd.dtype)
        xhat = (xd - running["mean"].reshape(bshape)) * inv

        def backward(g):
            return g * gd * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out = (xhat * gd + beta.data.reshape(bshape)).astype(xd.dtype)
    return record("batch_norm", (x, gamma, beta), out, backward)


def glorot_uniform(shape, fan_in: int, fan_out: int, rng: RngStream, dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


__all__ = [
    "add", "sub", "mul", "exp", "clamp", "sum", "mean", "reshape", "index",
    "relu", "leaky_relu", "sigmoid", "activation", "dropout", "affine",
    "avg_pool3d", "upsample3d_nearest", "conv3d", "conv3d_transpose",
    "conv_transpose_extent", "batch_norm", "glorot_uniform", "as_tensor",
]
