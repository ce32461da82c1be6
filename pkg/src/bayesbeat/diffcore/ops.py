"""Forward primitives with exact reverse-mode rules.

Every function takes and returns :class:`Tensor` objects and records a
vector-Jacobian product on the active tape. Computation happens in the dtype of
the inputs (float32 in normal use); reductions over batches accumulate in
float64.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from ..errors import ShapeError
from .tensor import Tensor, record

__all__ = [
    "RunningStats",
    "add",
    "batchnorm1d",
    "conv1d",
    "dense",
    "maxpool1d",
    "mean_last",
    "mul",
    "reshape",
    "scale",
    "softmax_nll",
    "softplus",
    "square",
    "sum",
]


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _out(data, like: Tensor) -> Tensor:
    return Tensor(data, dtype=like.data.dtype)


# --------------------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two tensors of identical shape (0-d allowed for either)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ", dim="shape")
    out = _out(a.data + b.data, a)

    def vjp(g):
        ga = g if a.size != 1 or g.size == 1 else np.sum(g, dtype=np.float64)
        gb = g if b.size != 1 or g.size == 1 else np.sum(g, dtype=np.float64)
        return ga, gb

    return record(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two tensors of identical shape."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ", dim="shape")
    out = _out(a.data * b.data, a)
    return record(out, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, c: float) -> Tensor:
    x = _as_tensor(x)
    out = _out(x.data * x.data.dtype.type(c), x)
    return record(out, (x,), lambda g: (g * c,))


def square(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = _out(np.square(x.data), x)
    return record(out, (x,), lambda g: (2.0 * x.data * g,))


def softplus(x: Tensor) -> Tensor:
    """``log(1 + exp(x))`` without overflow; the derivative is the logistic."""
    x = _as_tensor(x)
    out = _out(np.logaddexp(x.data.dtype.type(0), x.data), x)
    return record(out, (x,), lambda g: (g * expit(x.data),))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = _as_tensor(x)
    out = _out(np.sum(x.data, dtype=np.float64), x)
    return record(out, (x,), lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),))


def mean_last(x: Tensor) -> Tensor:
    """Average over the last axis (global average pooling over time)."""
    x = _as_tensor(x)
    n = x.shape[-1]
    out = _out(np.mean(x.data, axis=-1, dtype=np.float64), x)

    def vjp(g):
        return (np.broadcast_to(g[..., None] / n, x.shape).astype(x.dtype),)

    return record(out, (x,), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    out = _out(x.data.reshape(shape), x)
    return record(out, (x,), lambda g: (g.reshape(x.shape),))


# --------------------------------------------------------------------------- convolution


def _check_conv(x: Tensor, w: Tensor, b: Optional[Tensor], stride: int, padding: int):
    if w.data.ndim != 3:
        raise ShapeError(f"conv1d: kernel must be [C_out, C_in, K], got {w.shape}", dim="kernel")
    if x.data.ndim not in (2, 3):
        raise ShapeError(f"conv1d: input must be [C_in, L] or [B, C_in, L], got {x.shape}",
                         dim="input")
    c_out, c_in, k = w.shape
    if x.shape[-2] != c_in:
        raise ShapeError(f"conv1d: input has C_in={x.shape[-2]} but kernel expects {c_in}",
                         dim="C_in")
    if b is not None and b.shape != (c_out,):
        raise ShapeError(f"conv1d: bias shape {b.shape} does not match C_out={c_out}",
                         dim="C_out")
    if stride < 1:
        raise ShapeError(f"conv1d: stride must be >= 1, got {stride}", dim="stride")
    if padding < 0:
        raise ShapeError(f"conv1d: padding must be >= 0, got {padding}", dim="padding")
    if k > x.shape[-1] + 2 * padding:
        raise ShapeError(
            f"conv1d: kernel size K={k} exceeds padded length {x.shape[-1] + 2 * padding}",
            dim="K")


def conv1d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """1-D cross-correlation (no kernel flip).

    ``x`` is ``[C_in, L]`` or ``[B, C_in, L]``; ``w`` is ``[C_out, C_in, K]``.
    Output length is ``(L + 2*padding - K) // stride + 1``.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    b = None if b is None else _as_tensor(b)
    _check_conv(x, w, b, stride, padding)
    unbatched = x.data.ndim == 2
    xd = x.data[None] if unbatched else x.data
    bsz, c_in, length = xd.shape
    c_out, _, k = w.shape
    l_out = (length + 2 * padding - k) // stride + 1

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding))) if padding else xd
    cols = sliding_window_view(xp, k, axis=2)[:, :, ::stride, :]  # B, C, L_out, K
    cols = np.ascontiguousarray(cols.transpose(0, 2, 1, 3)).reshape(bsz * l_out, c_in * k)
    w2 = w.data.reshape(c_out, c_in * k)
    y = (cols @ w2.T).reshape(bsz, l_out, c_out).transpose(0, 2, 1)
    if b is not None:
        y = y + b.data[None, :, None]
    y = np.ascontiguousarray(y)
    out = _out(y[0] if unbatched else y, x)

    def vjp(g):
        g3 = g[None] if unbatched else g
        g2 = np.ascontiguousarray(g3.transpose(0, 2, 1)).reshape(bsz * l_out, c_out)
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gb = g3.sum(axis=(0, 2), dtype=np.float64) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2).reshape(bsz, l_out, c_in, k)
            gxp = np.zeros((bsz, c_in, length + 2 * padding), dtype=x.dtype)
            span = stride * (l_out - 1) + 1
            for j in range(k):
                gxp[:, :, j:j + span:stride] += gcols[:, :, :, j].transpose(0, 2, 1)
            gx = gxp[:, :, padding:padding + length]
            if unbatched:
                gx = gx[0]
        return (gx, gw) if b is None else (gx, gw, gb)

    return record(out, (x, w) if b is None else (x, w, b), vjp)


def maxpool1d(x: Tensor, window: int, stride: Optional[int] = None) -> Tensor:
    """Max over sliding windows of the last axis; ties route to the first index."""
    x = _as_tensor(x)
    stride = window if stride is None else stride
    length = x.shape[-1]
    if window < 1 or window > length:
        raise ShapeError(f"maxpool1d: window={window} invalid for length {length}", dim="window")
    if stride < 1:
        raise ShapeError(f"maxpool1d: stride must be >= 1, got {stride}", dim="stride")
    win = sliding_window_view(x.data, window, axis=-1)[..., ::stride, :]
    arg = np.argmax(win, axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    out = _out(np.ascontiguousarray(y), x)

    def vjp(g):
        l_out = arg.shape[-1]
        pos = arg + stride * np.arange(l_out)
        lead = int(np.prod(x.shape[:-1], dtype=np.int64))
        flat = (pos.reshape(lead, l_out) + length * np.arange(lead)[:, None]).ravel()
        gx = np.bincount(flat, weights=g.reshape(-1), minlength=lead * length)
        return (gx.reshape(x.shape).astype(x.dtype),)

    return record(out, (x,), vjp)


# --------------------------------------------------------------------------- normalization


@dataclass
class RunningStats:
    """Per-channel running mean/variance updated in training mode."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def init(cls, channels: int, momentum: float = 0.1, dtype=np.float32) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), momentum)


BN_EPS = 1e-5


def batchnorm1d(x: Tensor, gamma: Tensor, beta: Tensor, running: RunningStats,
                training: bool = True, eps: float = BN_EPS) -> Tensor:
    """Batch normalization over ``(B, L)`` per channel of a ``[B, C, L]`` input.

    Training mode normalizes with biased batch statistics and moves
    ``running`` towards them (the running variance uses the unbiased
    estimate). Eval mode normalizes with ``running``.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.data.ndim != 3:
        raise ShapeError(f"batchnorm1d: input must be [B, C, L], got {x.shape}", dim="input")
    bsz, c, length = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm1d: gamma/beta must have shape ({c},)", dim="C")
    if training and bsz < 2:
        raise ShapeError("batchnorm1d: training mode needs a batch of at least 2", dim="B")
    g_ = gamma.data[None, :, None]
    if training:
        n = bsz * length
        mu = x.data.mean(axis=(0, 2), dtype=np.float64)
        centered = x.data - mu[None, :, None]
        var = np.mean(np.square(centered, dtype=np.float64), axis=(0, 2))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (centered * inv_std[None, :, None]).astype(x.dtype)
        m = running.momentum
        running.mean[...] = (1 - m) * running.mean + m * mu
        running.var[...] = (1 - m) * running.var + m * var * (n / max(n - 1, 1))
    else:
        n = None
        inv_std = 1.0 / np.sqrt(running.var.astype(np.float64) + eps)
        xhat = ((x.data - running.mean[None, :, None]) * inv_std[None, :, None]).astype(x.dtype)
    out = _out(g_ * xhat + beta.data[None, :, None], x)

    def vjp(g):
        gg = np.sum(g * xhat, axis=(0, 2), dtype=np.float64)
        gbeta = np.sum(g, axis=(0, 2), dtype=np.float64)
        gxhat = g * g_
        if training:
            s1 = np.sum(gxhat, axis=(0, 2), dtype=np.float64)[None, :, None]
            s2 = np.sum(gxhat * xhat, axis=(0, 2), dtype=np.float64)[None, :, None]
            gx = (inv_std[None, :, None] / n) * (n * gxhat - s1 - xhat * s2)
        else:
            gx = gxhat * inv_std[None, :, None]
        return gx.astype(x.dtype), gg, gbeta

    return record(out, (x, gamma, beta), vjp)


# --------------------------------------------------------------------------- dense + loss


def dense(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ w.T + b`` for ``x`` of shape ``[B, F_in]``."""
    x, w = _as_tensor(x), _as_tensor(w)
    b = None if b is None else _as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError(f"dense: expected 2-D input and weight, got {x.shape}, {w.shape}",
                         dim="input")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"dense: input has F_in={x.shape[1]} but weight expects {w.shape[1]}",
                         dim="F_in")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"dense: bias shape {b.shape} does not match F_out={w.shape[0]}",
                         dim="F_out")
    y = x.data @ w.data.T
    if b is not None:
        y = y + b.data[None, :]
    out = _out(y, x)

    def vjp(g):
        gx = g @ w.data if x.requires_grad else None
        gw = g.T @ x.data if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0, dtype=np.float64)

    return record(out, (x, w) if b is None else (x, w, b), vjp)


def softmax_nll(logits: Tensor, labels) -> Tuple[Tensor, np.ndarray]:
    """Mean negative log-softmax of the labelled class.

    Returns ``(loss, probs)`` where ``probs`` is the float64 softmax of each row.
    Evaluated with the log-sum-exp trick, so saturated logits stay finite.
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels).astype(np.int64).reshape(-1)
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_nll: logits must be [B, classes], got {logits.shape}",
                         dim="logits")
    if labels.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"softmax_nll: {labels.shape[0]} labels for {logits.shape[0]} rows", dim="B")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeError("softmax_nll: labels out of range", dim="labels")
    z = logits.data.astype(np.float64)
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax + np.log(np.sum(np.exp(z - zmax), axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(z.shape[0])
    bsz = max(z.shape[0], 1)
    loss = -np.sum(logp[rows, labels]) / bsz
    probs = np.exp(logp)
    out = _out(loss, logits)

    def vjp(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        return ((d * (np.asarray(g).item() / bsz)).astype(logits.dtype),)

    return record(out, (logits,), vjp), probs
