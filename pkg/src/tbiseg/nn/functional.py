"""Differentiable primitives for 2D/3D CNNs.

Layout is ``(batch, channels, *spatial)`` with two or three spatial axes.
Convolution is cross-correlation (no kernel flip) implemented as im2col +
one batched matmul; transposed convolution is its exact adjoint.
"""
from __future__ import annotations

import itertools
from typing import Optional, Sequence, Tuple

import numpy as np

from .tensor import Tensor, as_tensor, make

__all__ = [
    "ShapeError",
    "conv",
    "conv_transpose",
    "conv_output_size",
    "conv_transpose_output_size",
    "max_pool",
    "avg_pool",
    "global_avg_pool",
    "instance_norm",
    "batch_norm",
    "relu",
    "leaky_relu",
    "softmax_channels",
    "concat_channels",
    "dense",
]


class ShapeError(ValueError):
    pass


def _tuple(v, n: int) -> Tuple[int, ...]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * n
    v = tuple(int(a) for a in v)
    if len(v) != n:
        raise ShapeError(f"expected {n} values, got {v}")
    return v


def conv_output_size(n: int, k: int, p: int = 0, s: int = 1) -> int:
    return (n + 2 * p - k) // s + 1


def conv_transpose_output_size(n: int, k: int, p: int = 0, s: int = 1) -> int:
    return (n - 1) * s + k - 2 * p


def _offsets(ksize):
    return list(itertools.product(*(range(k) for k in ksize)))


def _window(offset, stride, out_size):
    return tuple(slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offset, stride, out_size))


def _im2col(xp: np.ndarray, ksize, stride, out_size) -> np.ndarray:
    """(N, C, *padded) -> (N, C*K, P) where K = prod(ksize), P = prod(out_size)."""
    n, c = xp.shape[:2]
    offs = _offsets(ksize)
    cols = np.empty((n, c, len(offs)) + tuple(out_size), dtype=xp.dtype)
    for i, off in enumerate(offs):
        cols[:, :, i] = xp[(slice(None), slice(None)) + _window(off, stride, out_size)]
    return cols.reshape(n, c * len(offs), -1)


def _col2im(cols: np.ndarray, padded_shape, ksize, stride, out_size) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add columns into a padded grid."""
    n = cols.shape[0]
    offs = _offsets(ksize)
    c = cols.shape[1] // len(offs)
    cols = cols.reshape((n, c, len(offs)) + tuple(out_size))
    out = np.zeros((n, c) + tuple(padded_shape), dtype=cols.dtype)
    for i, off in enumerate(offs):
        out[(slice(None), slice(None)) + _window(off, stride, out_size)] += cols[:, :, i]
    return out


def _pad(x: np.ndarray, pad) -> np.ndarray:
    if not any(pad):
        return x
    return np.pad(x, [(0, 0), (0, 0)] + [(p, p) for p in pad])


def _unpad(x: np.ndarray, pad) -> np.ndarray:
    if not any(pad):
        return x
    return x[(slice(None), slice(None)) + tuple(slice(p, x.shape[i + 2] - p) for i, p in enumerate(pad))]


def _batched_outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """sum_n a[n] @ b[n].T; a per-sample matmul loop beats tensordot here."""
    out = a[0] @ b[0].T
    for i in range(1, a.shape[0]):
        out += a[i] @ b[i].T
    return out


def _result_dtype(*arrays):
    return np.result_type(*[a.dtype for a in arrays])


def conv(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride=1, padding=0) -> Tensor:
    """N-d cross-correlation. ``w`` has shape ``(out, in, *kernel)``.

    ``padding="same"`` pads ``k // 2`` (odd kernels, stride 1).
    """
    x, w = as_tensor(x), as_tensor(w)
    nd = x.ndim - 2
    if nd not in (2, 3) or w.ndim != nd + 2:
        raise ShapeError(f"conv expects (N, C, *{nd}d) input and matching kernel; got {x.shape}, {w.shape}")
    out_ch, in_ch = w.shape[:2]
    if x.shape[1] != in_ch:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {in_ch}")
    ksize = w.shape[2:]
    stride = _tuple(stride, nd)
    if padding == "same":
        if any(k % 2 == 0 for k in ksize):
            raise ShapeError("'same' padding needs odd kernel sizes")
        pad = tuple(k // 2 for k in ksize)
    else:
        pad = _tuple(padding, nd)
    out_size = tuple(conv_output_size(n, k, p, s) for n, k, p, s in zip(x.shape[2:], ksize, pad, stride))
    if min(out_size) < 1:
        raise ShapeError(f"kernel {ksize} larger than padded input {x.shape[2:]}")

    dtype = _result_dtype(x.data, w.data)
    xp = _pad(x.data.astype(dtype, copy=False), pad)
    cols = _im2col(xp, ksize, stride, out_size)
    w2 = w.data.reshape(out_ch, -1).astype(dtype, copy=False)
    out = np.matmul(w2, cols)
    if b is not None:
        b = as_tensor(b)
        out += b.data.astype(dtype).reshape(1, -1, 1)
    n = x.shape[0]
    out = out.reshape((n, out_ch) + out_size)
    padded_shape = xp.shape[2:]

    def grad(g):
        g2 = g.reshape(n, out_ch, -1)
        gw = _batched_outer(g2, cols).reshape(w.shape).astype(w.data.dtype)
        gx = None
        if x.requires_grad:
            gx = _unpad(_col2im(np.matmul(w2.T, g2), padded_shape, ksize, stride, out_size), pad)
            gx = gx.astype(x.data.dtype, copy=False)
        gb = g2.sum(axis=(0, 2)).astype(b.data.dtype) if b is not None else None
        return (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return make(out, parents, grad, "conv")


def conv_transpose(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride=1, padding=0) -> Tensor:
    """Adjoint of :func:`conv` for a shared kernel ``w`` of shape ``(in, out, *kernel)``.

    Here ``in`` is the channel count of ``x``; output spatial size is
    ``(n - 1) * stride + k - 2 * padding``.
    """
    x, w = as_tensor(x), as_tensor(w)
    nd = x.ndim - 2
    if nd not in (2, 3) or w.ndim != nd + 2:
        raise ShapeError(f"conv_transpose expects matching ranks; got {x.shape}, {w.shape}")
    in_ch, out_ch = w.shape[:2]
    if x.shape[1] != in_ch:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {in_ch}")
    ksize = w.shape[2:]
    stride = _tuple(stride, nd)
    if min(stride) < 1:
        raise ShapeError("stride must be >= 1")
    pad = _tuple(padding, nd)
    in_size = x.shape[2:]
    full = tuple(conv_transpose_output_size(n, k, 0, s) for n, k, s in zip(in_size, ksize, stride))
    if any(f - 2 * p < 1 for f, p in zip(full, pad)):
        raise ShapeError("padding removes the whole output")

    dtype = _result_dtype(x.data, w.data)
    n = x.shape[0]
    w2 = w.data.reshape(in_ch, -1).astype(dtype, copy=False)
    x2 = x.data.astype(dtype, copy=False).reshape(n, in_ch, -1)
    out = _unpad(_col2im(np.matmul(w2.T, x2), full, ksize, stride, in_size), pad)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.astype(dtype).reshape((1, -1) + (1,) * nd)
    out = np.ascontiguousarray(out)

    def grad(g):
        gp = _pad(g, pad)
        cols = _im2col(gp, ksize, stride, in_size)
        gx = np.matmul(w2, cols).reshape(x.shape)
        gw = _batched_outer(x2, cols).reshape(w.shape).astype(w.data.dtype)
        gb = g.sum(axis=(0,) + tuple(range(2, g.ndim))).astype(b.data.dtype) if b is not None else None
        return (gx.astype(x.data.dtype, copy=False), gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return make(out, parents, grad, "conv_transpose")


def max_pool(x: Tensor, kernel=2, stride=None) -> Tensor:
    """Max pooling without padding; ties go to the first window offset."""
    x = as_tensor(x)
    nd = x.ndim - 2
    ksize = _tuple(kernel, nd)
    stride = _tuple(stride if stride is not None else kernel, nd)
    out_size = tuple(conv_output_size(n, k, 0, s) for n, k, s in zip(x.shape[2:], ksize, stride))
    if min(out_size) < 1:
        raise ShapeError(f"pool kernel {ksize} larger than input {x.shape[2:]}")
    offs = _offsets(ksize)
    lead = (slice(None), slice(None))
    best = x.data[lead + _window(offs[0], stride, out_size)].copy()
    arg = np.zeros(best.shape, dtype=np.int16)
    for i, off in enumerate(offs[1:], start=1):
        cand = x.data[lead + _window(off, stride, out_size)]
        better = cand > best
        best = np.where(better, cand, best)
        arg[better] = i

    def grad(g):
        gx = np.zeros_like(x.data)
        for i, off in enumerate(offs):
            gx[lead + _window(off, stride, out_size)] += np.where(arg == i, g, 0)
        return (gx,)

    return make(best, (x,), grad, "max_pool")


def avg_pool(x: Tensor, kernel=2, stride=None) -> Tensor:
    x = as_tensor(x)
    nd = x.ndim - 2
    ksize = _tuple(kernel, nd)
    stride = _tuple(stride if stride is not None else kernel, nd)
    out_size = tuple(conv_output_size(n, k, 0, s) for n, k, s in zip(x.shape[2:], ksize, stride))
    if min(out_size) < 1:
        raise ShapeError(f"pool kernel {ksize} larger than input {x.shape[2:]}")
    offs = _offsets(ksize)
    lead = (slice(None), slice(None))
    scale = 1.0 / len(offs)
    out = np.zeros(x.shape[:2] + out_size, dtype=x.data.dtype)
    for off in offs:
        out += x.data[lead + _window(off, stride, out_size)]
    out *= scale

    def grad(g):
        gx = np.zeros_like(x.data)
        for off in offs:
            gx[lead + _window(off, stride, out_size)] += g * scale
        return (gx,)

    return make(out, (x,), grad, "avg_pool")


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, *spatial) -> (N, C)."""
    x = as_tensor(x)
    axes = tuple(range(2, x.ndim))
    m = int(np.prod(x.shape[2:]))
    out = x.data.mean(axis=axes, dtype=np.float64).astype(x.data.dtype)

    def grad(g):
        return (np.broadcast_to(g.reshape(g.shape + (1,) * len(axes)) / m, x.shape).astype(x.data.dtype),)

    return make(out, (x,), grad, "global_avg_pool")


def _normalize(x: np.ndarray, axes, eps: float):
    mu = x.mean(axis=axes, keepdims=True, dtype=np.float64)
    var = ((x - mu) ** 2).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((x - mu) * inv).astype(x.dtype)
    return xhat, inv.astype(x.dtype), mu, var


def _norm_backward(g, xhat, inv, axes, m):
    g64 = g.astype(np.float64)
    s1 = g64.sum(axis=axes, keepdims=True)
    s2 = (g64 * xhat).sum(axis=axes, keepdims=True)
    return (inv * (g - (s1 + xhat * s2) / m)).astype(g.dtype)


def _affine(xhat, x: Tensor, gamma, beta, parents, grad_xhat, op):
    """Apply per-channel ``gamma * xhat + beta`` and wire up the gradient."""
    shape = (1, -1) + (1,) * (x.ndim - 2)
    out = xhat
    if gamma is not None:
        out = out * gamma.data.reshape(shape) + beta.data.reshape(shape)
    red = (0,) + tuple(range(2, x.ndim))

    def grad(g):
        gg = g * gamma.data.reshape(shape) if gamma is not None else g
        gx = grad_xhat(gg)
        if gamma is None:
            return (gx,)
        ggamma = (g * xhat).sum(axis=red, dtype=np.float64).astype(gamma.data.dtype)
        gbeta = g.sum(axis=red, dtype=np.float64).astype(beta.data.dtype)
        return (gx, ggamma, gbeta)

    return make(out, parents, grad, op)


def instance_norm(x: Tensor, gamma: Optional[Tensor] = None, beta: Optional[Tensor] = None, eps: float = 1e-5) -> Tensor:
    """Normalize each (batch, channel) over its spatial axes."""
    x = as_tensor(x)
    axes = tuple(range(2, x.ndim))
    m = int(np.prod(x.shape[2:]))
    xhat, inv, _, _ = _normalize(x.data, axes, eps)
    parents = (x,) if gamma is None else (x, gamma, beta)
    return _affine(xhat, x, gamma, beta, parents, lambda gg: _norm_backward(gg, xhat, inv, axes, m), "instance_norm")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool = True,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over (batch, spatial).

    In training mode the running statistics arrays are updated in place.
    """
    x = as_tensor(x)
    axes = (0,) + tuple(range(2, x.ndim))
    shape = (1, -1) + (1,) * (x.ndim - 2)
    if training:
        m = x.data.size // x.shape[1]
        xhat, inv, mu, var = _normalize(x.data, axes, eps)
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1 - momentum
        running_var += momentum * var.reshape(-1) * m / max(m - 1, 1)
        backward_xhat = lambda gg: _norm_backward(gg, xhat, inv, axes, m)  # noqa: E731
    else:
        inv = (1.0 / np.sqrt(running_var + eps)).astype(x.data.dtype).reshape(shape)
        xhat = ((x.data - running_mean.reshape(shape)) * inv).astype(x.data.dtype)
        backward_xhat = lambda gg: gg * inv  # noqa: E731
    return _affine(xhat, x, gamma, beta, (x, gamma, beta), backward_xhat, "batch_norm")


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    slope = float(slope)
    out = np.where(pos, x.data, x.data * slope)
    return make(out, (x,), lambda g: (np.where(pos, g, g * slope),), "leaky_relu" if slope else "relu")


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over axis 1."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def grad(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return make(s, (x,), grad, "softmax")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    if len({t.shape[:1] + t.shape[2:] for t in xs}) != 1:
        raise ShapeError(f"concat needs equal batch/spatial shapes, got {[t.shape for t in xs]}")
    splits = np.cumsum([t.shape[1] for t in xs])[:-1]
    out = np.concatenate([t.data for t in xs], axis=1)
    return make(out, tuple(xs), lambda g: tuple(np.split(g, splits, axis=1)), "concat")


def dense(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Fully connected layer: ``(N, F) @ (F, O) + b``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense shapes incompatible: {x.shape} @ {w.shape}")
    out = x.data @ w.data
    if b is not None:
        b = as_tensor(b)
        out = out + b.data

    def grad(g):
        gb = g.sum(axis=0) if b is not None else None
        return (g @ w.data.T, x.data.T @ g, gb)

    parents = (x, w) if b is None else (x, w, b)
    return make(out, parents, grad, "dense")
