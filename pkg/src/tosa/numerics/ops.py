"""Differentiable operations on :class:`Tensor`.

Every op computes its forward value with plain numpy and registers a
backward closure on the active :class:`GradTape`. Broadcasting follows numpy
rules; gradients are summed back to each operand's shape.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit
from scipy.special import erf

from .tensor import NumericsError, ShapeError, Tensor, as_tensor, emit


class ConfigError(ValueError):
    """Invalid hyperparameter for an op (kernel width, epsilon, ...)."""


class InputError(ValueError):
    """Op input violates a documented precondition."""


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return emit("add", a.data + b.data, (a, b),
                lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return emit("sub", a.data - b.data, (a, b),
                lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return emit("mul", a.data * b.data, (a, b),
                lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return emit("scale", x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return emit("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT_HALF))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
    return emit("gelu", x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported as NumericsError
        out = np.exp(x.data)
    return emit("exp", out, (x,), lambda g: (g * out,))


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from e


# ----------------------------------------------------------------- reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return emit("sum", np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ------------------------------------------------------------ shape plumbing


def reshape(x: Tensor, shape) -> Tensor:
    return emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return emit("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                lambda g: (g.transpose(inv),))


def swapaxes(x: Tensor, a: int = -1, b: int = -2) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def concat(xs, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return emit("concat", np.concatenate([x.data for x in xs], axis=axis), xs,
                lambda g: tuple(np.split(g, splits, axis=axis)))


def index(x: Tensor, idx) -> Tensor:
    """Basic (slice / integer) indexing."""
    def backward(g):
        full = np.zeros_like(x.data)
        full[idx] += g
        return (full,)

    return emit("index", np.array(x.data[idx]), (x,), backward)


def gather(x: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """Take entries of ``x`` along ``axis`` (numpy ``take_along_axis`` semantics).

    ``indices`` must broadcast against ``x`` on every axis except ``axis``.
    """
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    n = x.shape[axis]
    if indices.size and (indices.min() < 0 or indices.max() >= n):
        raise IndexError(f"gather index out of range for axis of length {n}")
    out = np.take_along_axis(x.data, indices, axis=axis)

    def backward(g):
        full = np.zeros(np.broadcast_shapes(x.shape[:axis] + (n,) + x.shape[axis + 1:],
                                            g.shape[:axis] + (n,) + g.shape[axis + 1:]))
        _add_along_axis(full, indices, g, axis)
        return (unbroadcast(full, x.shape),)

    return emit("gather", out, (x,), backward)


def scatter_rows(attended: Tensor, skipped: Tensor, att_idx: np.ndarray,
                 skip_idx: np.ndarray, axis: int) -> Tensor:
    """Inverse of two gathers: place rows of ``attended``/``skipped`` at their indices.

    ``att_idx`` and ``skip_idx`` must partition ``range(L)`` along ``axis``.
    """
    axis = axis % attended.ndim
    if attended.shape[:axis] + attended.shape[axis + 1:] != skipped.shape[:axis] + skipped.shape[axis + 1:]:
        raise ShapeError(f"scatter_rows operands differ off-axis: {attended.shape} vs {skipped.shape}")
    shape = list(attended.shape)
    shape[axis] = attended.shape[axis] + skipped.shape[axis]
    att_idx = np.broadcast_to(np.asarray(att_idx, dtype=np.intp), attended.shape)
    skip_idx = np.broadcast_to(np.asarray(skip_idx, dtype=np.intp), skipped.shape)
    out = np.empty(shape)
    np.put_along_axis(out, att_idx, attended.data, axis=axis)
    np.put_along_axis(out, skip_idx, skipped.data, axis=axis)

    def backward(g):
        return (np.take_along_axis(g, att_idx, axis=axis),
                np.take_along_axis(g, skip_idx, axis=axis))

    return emit("scatter_rows", out, (attended, skipped), backward)


def _add_along_axis(target: np.ndarray, indices: np.ndarray, values: np.ndarray, axis: int) -> None:
    # unbuffered scatter-add; take_along_axis indices may repeat
    idx = np.broadcast_to(indices, values.shape)
    grids = np.indices(values.shape, sparse=True)
    full_idx = tuple(idx if d == axis else grids[d] for d in range(values.ndim))
    np.add.at(target, full_idx, values)


# ------------------------------------------------------------ linear algebra


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as e:
        raise ShapeError(f"matmul batch dims differ: {a.shape} @ {b.shape}") from e

    def backward(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return emit("matmul", a.data @ b.data, (a, b), backward)


# ---------------------------------------------------------------- softmaxes


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return emit("softmax", out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return emit("log_softmax", out, (x,), backward)


def _check_axis(x: Tensor, axis: int) -> None:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} invalid for shape {x.shape}")


# ------------------------------------------------------------ normalization


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, axis: int = -1, eps: float = 1e-6) -> Tensor:
    """Normalize ``x`` to zero mean / unit variance along ``axis``, then apply gain and bias."""
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    _check_axis(x, axis)
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[axis]
    gshape = gain.shape
    out = xhat * gain.data + bias.data

    def backward(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=axis, keepdims=True)
                    - xhat * (gx_hat * xhat).sum(axis=axis, keepdims=True) / n)
        return gx, unbroadcast(g * xhat, gshape), unbroadcast(g, bias.shape)

    return emit("layer_norm", out, (x, gain, bias), backward)


# --------------------------------------------------------------- convolution


@njit(cache=True)
def _conv1d_ordered(xp, w, b, out):
    # out[r, o, l] = b[o] + sum_c sum_j w[o, c, j] * xp[r, c, l + j], added in that order
    rows, c_out, length = out.shape
    c_in, k = w.shape[1], w.shape[2]
    for r in range(rows):
        for o in range(c_out):
            for l in range(length):
                out[r, o, l] = b[o]
            for c in range(c_in):
                for j in range(k):
                    wv = w[o, c, j]
                    for l in range(length):
                        out[r, o, l] += wv * xp[r, c, l + j]


@njit(cache=True)
def _conv1d_backward(g, xp, w, gxp, gw, gb):
    rows, c_out, length = g.shape
    c_in, k = w.shape[1], w.shape[2]
    for r in range(rows):
        for o in range(c_out):
            for l in range(length):
                gb[o] += g[r, o, l]
            for c in range(c_in):
                for j in range(k):
                    wv = w[o, c, j]
                    acc = 0.0
                    for l in range(length):
                        gv = g[r, o, l]
                        acc += gv * xp[r, c, l + j]
                        gxp[r, c, l + j] += wv * gv
                    gw[o, c, j] += acc


def conv1d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Length-preserving 1D cross-correlation over the last axis.

    ``x`` is ``(..., C_in, L)``, ``kernels`` ``(C_out, C_in, k)`` with odd ``k``,
    ``bias`` ``(C_out,)``. Zero padding of ``(k-1)//2`` on each side.

    Each output element is accumulated in a fixed order (bias, then input
    channels ascending, then taps ascending), so results match a scalar loop
    with the same order bit-for-bit.
    """
    c_out, c_in, k = kernels.shape
    if k % 2 == 0:
        raise ConfigError(f"conv1d kernel width must be odd, got {k}")
    if x.ndim < 2 or x.shape[-2] != c_in:
        raise ShapeError(f"conv1d expects (..., {c_in}, L) input, got {x.shape}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv1d bias must have shape ({c_out},), got {bias.shape}")
    pad = (k - 1) // 2
    length = x.shape[-1]
    lead = x.shape[:-2]
    xp = np.zeros(lead + (c_in, length + 2 * pad))
    xp[..., pad:pad + length] = x.data
    w = kernels.data
    out = np.empty(lead + (c_out, length))
    _conv1d_ordered(xp.reshape(-1, c_in, length + 2 * pad), w, bias.data, out.reshape(-1, c_out, length))

    def backward(g):
        xflat = xp.reshape(-1, c_in, length + 2 * pad)
        gxp = np.zeros_like(xflat)
        gw = np.zeros_like(w)
        gb = np.zeros(c_out)
        _conv1d_backward(np.ascontiguousarray(g).reshape(-1, c_out, length), xflat, w, gxp, gw, gb)
        return gxp[..., pad:pad + length].reshape(x.shape), gw, gb

    return emit("conv1d", out, (x, kernels, bias), backward)


# -------------------------------------------------------------------- losses


def kl_divergence(log_p_pred: Tensor, p_true, axis: int = -1) -> Tensor:
    """KL(p_true || exp(log_p_pred)) summed over ``axis``, averaged over the other dims.

    ``p_true`` is a fixed target; no gradient flows into it. Terms with
    ``p_true == 0`` contribute zero.
    """
    p = p_true.data if isinstance(p_true, Tensor) else np.asarray(p_true, dtype=np.float64)
    if p.shape != log_p_pred.shape:
        raise ShapeError(f"kl_divergence shapes differ: {log_p_pred.shape} vs {p.shape}")
    _check_axis(log_p_pred, axis)
    if np.any(p < 0):
        raise InputError("p_true has negative entries")
    sums = p.sum(axis=axis)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise InputError(f"p_true not normalized along axis {axis} (max error {np.abs(sums - 1).max():.3g})")
    count = p.size // p.shape[axis]
    pos = p > 0
    log_p = np.log(np.where(pos, p, 1.0))
    terms = np.where(pos, p * (log_p - log_p_pred.data), 0.0)
    out = np.asarray(terms.sum() / count)

    def backward(g):
        return (-g * p / count,)

    return emit("kl_divergence", out, (log_p_pred,), backward)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects (N, C) logits and (N,) labels, got {logits.shape}, {labels.shape}")
    lsm = log_softmax(logits, axis=-1)
    picked = gather(lsm, labels[:, None], axis=1)
    return scale(mean(picked), -1.0)


def mse(pred: Tensor, target) -> Tensor:
    diff = sub(pred, as_tensor(target))
    return mean(mul(diff, diff))


__all__ = [
    "ConfigError", "InputError", "NumericsError", "add", "sub", "mul", "scale", "relu", "gelu",
    "exp", "sum", "mean", "reshape", "transpose", "swapaxes", "concat", "index", "gather",
    "scatter_rows", "matmul", "softmax", "log_softmax", "layer_norm", "conv1d", "kl_divergence",
    "cross_entropy", "mse", "unbroadcast",
]
