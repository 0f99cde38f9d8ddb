"""Differentiable kernels.

Sequence layouts are ``(batch, time, channels)``. Convolution kernels are
stored as ``(width, in_channels, out_channels)`` for :func:`conv1d`; the
transposed convolution :func:`deconv1d` takes the *same* array layout and is
the exact linear adjoint of :func:`conv1d` for a matching stride.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import Tensor, as_tensor, grad_enabled, make_result

PROB_CLAMP = 1e-7


class ShapeError(ValueError):
    pass


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return make_result(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return make_result(a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return make_result(a.data * b.data, (a, b), back)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape

    def back(g):
        return (g.reshape(old),)

    return make_result(x.data.reshape(shape), (x,), back)


def crop_time(x: Tensor, length: int) -> Tensor:
    """Keep the first ``length`` steps of a ``(B, T, C)`` tensor."""
    if length > x.shape[1]:
        raise ShapeError(f"cannot crop time axis of length {x.shape[1]} to {length}")

    def back(g):
        full = np.zeros_like(x.data)
        full[:, :length] = g
        return (full,)

    return make_result(x.data[:, :length], (x,), back)


def concat(xs: list[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        out = []
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if not x.requires_grad:
                out.append(None)
                continue
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return out

    return make_result(np.concatenate([x.data for x in xs], axis=axis), xs, back)


def total(x: Tensor) -> Tensor:
    def back(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(x.data.sum()), (x,), back)


def mean(x: Tensor) -> Tensor:
    n = x.data.size

    def back(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return make_result(np.asarray(x.data.mean()), (x,), back)


def sum_squares(x: Tensor) -> Tensor:
    def back(g):
        return (2.0 * g * x.data,)

    return make_result(np.asarray(np.sum(x.data * x.data)), (x,), back)


def row_sq_norm(x: Tensor) -> Tensor:
    """Per-example squared Frobenius norm over all non-batch axes."""
    axes = tuple(range(1, x.data.ndim))

    def back(g):
        return (2.0 * g.reshape((-1,) + (1,) * len(axes)) * x.data,)

    return make_result(np.sum(x.data * x.data, axis=axes), (x,), back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def back(g):
        return (g * mask,)

    return make_result(x.data * mask, (x,), back)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def back(g):
        return (g * (1.0 - y * y),)

    return make_result(y, (x,), back)


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _stable_sigmoid(x.data)

    def back(g):
        return (g * y * (1.0 - y),)

    return make_result(y, (x,), back)


def softplus(x: Tensor) -> Tensor:
    z = x.data
    y = np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))

    def back(g):
        return (g * _stable_sigmoid(z),)

    return make_result(y, (x,), back)


# ---------------------------------------------------------------------------
# layers


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"dense: input width {x.shape[-1]} does not match weight rows {w.shape[0]}")
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data
    out = out.reshape(x.shape[:-1] + (w.shape[1],))
    parents = (x, w) if b is None else (x, w, b)

    def back(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if b.requires_grad else None)

    return make_result(out, parents, back)


def _conv_out_len(t: int, width: int, stride: int) -> int:
    return (t - width) // stride + 1


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Valid correlation over the time axis.

    x: (B, T, C); w: (width, C, F); b: (F,). Returns (B, (T - width)//stride + 1, F).
    """
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise ShapeError(f"conv1d expects rank-3 input and kernel, got {x.shape} and {w.shape}")
    bsz, t, c = x.shape
    width, kc, f = w.shape
    if kc != c:
        raise ShapeError(f"conv1d: kernel depth {kc} does not match input channels {c}")
    if stride < 1:
        raise ShapeError(f"conv1d: stride must be >= 1, got {stride}")
    if t < width:
        raise ShapeError(f"conv1d: sequence length {t} shorter than kernel width {width}")
    t_out = _conv_out_len(t, width, stride)
    span = stride * (t_out - 1) + 1
    # sum of shifted (B, T_out, C) @ (C, F) products; avoids materialising im2col
    out = x.data[:, 0:span:stride] @ w.data[0]
    for j in range(1, width):
        out += x.data[:, j:j + span:stride] @ w.data[j]
    if b is not None:
        out += b.data
    parents = (x, w) if b is None else (x, w, b)

    def back(g):
        gx = None
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for j in range(width):
                gx[:, j:j + span:stride] += g @ w.data[j].T
        gw = None
        if w.requires_grad:
            win = sliding_window_view(x.data, width, axis=1)[:, ::stride][:, :t_out]
            cols = np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(bsz * t_out, width * c)
            gw = (cols.T @ g.reshape(bsz * t_out, f)).reshape(width, c, f)
        if b is None:
            return gx, gw
        return gx, gw, (g.sum(axis=(0, 1)) if b.requires_grad else None)

    return make_result(out, parents, back)


def deconv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Transposed convolution: the adjoint of :func:`conv1d` with kernel ``w``.

    x: (B, T_in, F); w: (width, C, F); b: (C,). Returns (B, (T_in - 1)*stride + width, C).
    """
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise ShapeError(f"deconv1d expects rank-3 input and kernel, got {x.shape} and {w.shape}")
    bsz, t_in, f = x.shape
    width, c, kf = w.shape
    if kf != f:
        raise ShapeError(f"deconv1d: kernel depth {kf} does not match input channels {f}")
    if stride < 1:
        raise ShapeError(f"deconv1d: stride must be >= 1, got {stride}")
    t_out = (t_in - 1) * stride + width
    span = stride * (t_in - 1) + 1
    wr = w.data.reshape(width * c, f)
    x2 = x.data.reshape(bsz * t_in, f)
    z = (x2 @ wr.T).reshape(bsz, t_in, width, c)
    out = np.zeros((bsz, t_out, c), dtype=np.result_type(x.data, w.data))
    for j in range(width):
        out[:, j:j + span:stride] += z[:, :, j]
    if b is not None:
        out += b.data
    parents = (x, w) if b is None else (x, w, b)

    def back(g):
        dz = np.empty((bsz, t_in, width, c), dtype=g.dtype)
        for j in range(width):
            dz[:, :, j] = g[:, j:j + span:stride]
        dz2 = dz.reshape(bsz * t_in, width * c)
        gx = (dz2 @ wr).reshape(x.shape) if x.requires_grad else None
        gw = (dz2.T @ x2).reshape(width, c, f) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g.sum(axis=(0, 1)) if b.requires_grad else None)

    return make_result(out, parents, back)


def max_over_time(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """Per-channel maximum over axis 1 of a ``(B, T, F)`` map.

    Returns the ``(B, F)`` maxima and the argmax indices (first occurrence on
    ties); the gradient is routed only to those positions.
    """
    if x.data.ndim != 3:
        raise ShapeError(f"max_over_time expects (B, T, F), got {x.shape}")
    if x.shape[1] < 1:
        raise ShapeError("max_over_time: empty time axis")
    idx = np.argmax(x.data, axis=1)
    out = np.take_along_axis(x.data, idx[:, None, :], axis=1)[:, 0, :]

    def back(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[:, None, :], g[:, None, :], axis=1)
        return (gx,)

    return make_result(out, (x,), back), idx


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    if labels.shape != (n,):
        raise ShapeError(f"softmax_xent: expected {n} labels, got shape {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z[np.arange(n), labels] - logsum
    p = np.exp(z - logsum[:, None])

    def back(g):
        d = p.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (g / n),)

    return make_result(np.asarray(-logp.mean()), (logits,), back)


def binary_xent(p: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy on probabilities, clamped to ``[1e-7, 1 - 1e-7]``."""
    t = np.broadcast_to(np.asarray(targets, dtype=p.dtype), p.shape)
    if np.any(~np.isfinite(p.data)) or np.any(p.data < 0) or np.any(p.data > 1):
        raise ValueError("binary_xent: probabilities must lie in [0, 1]")
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("binary_xent: targets must lie in [0, 1]")
    pc = np.clip(p.data, PROB_CLAMP, 1.0 - PROB_CLAMP)
    n = p.data.size
    loss = -(t * np.log(pc) + (1.0 - t) * np.log1p(-pc)).mean()
    inside = (p.data > PROB_CLAMP) & (p.data < 1.0 - PROB_CLAMP)

    def back(g):
        return ((g / n) * (pc - t) / (pc * (1.0 - pc)) * inside,)

    return make_result(np.asarray(loss), (p,), back)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy computed from logits (no clamping needed)."""
    t = np.broadcast_to(np.asarray(targets, dtype=logits.dtype), logits.shape)
    z = logits.data
    # -[t log s(z) + (1-t) log(1-s(z))] = softplus(z) - t z
    loss = (np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z))) - t * z).mean()
    n = z.size

    def back(g):
        return ((g / n) * (_stable_sigmoid(z) - t),)

    return make_result(np.asarray(loss), (logits,), back)


@dataclass
class BatchNormState:
    """Running statistics for :func:`batch_norm`."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    updates: int = field(default=0)

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float64):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), momentum, eps)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Normalise each channel (last axis) over every other axis.

    Training mode uses batch statistics and updates ``state`` with momentum;
    inference mode uses the running statistics.
    """
    c = x.shape[-1]
    x2 = x.data.reshape(-1, c)
    m = x2.shape[0]
    if training:
        if x.shape[0] < 2:
            raise ShapeError("batch_norm in training mode needs a batch of at least 2")
        mu = x2.mean(axis=0)
        var = x2.var(axis=0)
        if grad_enabled():
            unbiased = var * m / max(m - 1, 1)
            state.mean = (1 - state.momentum) * state.mean + state.momentum * mu
            state.var = (1 - state.momentum) * state.var + state.momentum * unbiased
            state.updates += 1
    else:
        mu, var = state.mean, state.var
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x2 - mu) * inv
    out = (xhat * gamma.data + beta.data).reshape(x.shape)

    def back(g):
        g2 = g.reshape(-1, c)
        gg = (g2 * xhat).sum(axis=0) if gamma.requires_grad else None
        gb = g2.sum(axis=0) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g2 * gamma.data
            if training:
                gx = inv / m * (m * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            else:
                gx = dxhat * inv
            gx = gx.reshape(x.shape)
        return gx, gg, gb

    return make_result(out, (x, gamma, beta), back)


def normalize_only(x: np.ndarray, eps: float = 0.0) -> np.ndarray:
    """Batch-norm standardisation without scale/shift (plain numpy)."""
    c = x.shape[-1]
    x2 = x.reshape(-1, c)
    return ((x2 - x2.mean(axis=0)) / np.sqrt(x2.var(axis=0) + eps)).reshape(x.shape)
