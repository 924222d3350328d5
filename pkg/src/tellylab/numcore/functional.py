"""Fused differentiable ops used by the encoder, heads and probes."""

from __future__ import annotations

import math

import numpy as np

from .tensor import DimensionError, Tensor, as_tensor, make_result


class DegenerateVectorError(ValueError):
    """A vector with zero norm was passed where a direction is required."""


def _axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _axis(x, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _axis(x, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), backward, "log_softmax")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply ``gain`` and ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = rstd * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        reduce_axes = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=reduce_axes) if gain.requires_grad else None
        gbias = g.sum(axis=reduce_axes) if bias.requires_grad else None
        return gx, ggain, gbias

    return make_result(out.astype(x.dtype, copy=False), (x, gain, bias), backward, "layer_norm")


def cross_entropy(logits, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row-wise softmax."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    n, c = logits.shape
    if n == 0:
        raise DimensionError("cross_entropy over an empty batch")
    if targets.min() < 0 or targets.max() >= c:
        raise IndexError(f"target class out of range [0, {c})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = np.asarray((lse - shifted[rows, targets]).mean(), dtype=logits.dtype)

    def backward(g):
        probs = np.exp(shifted - lse[:, None])
        probs[rows, targets] -= 1.0
        return (probs * (g / n),)

    return make_result(loss, (logits,), backward, "cross_entropy")


def binary_cross_entropy_with_logits(logits, targets) -> Tensor:
    logits = as_tensor(logits)
    y = np.asarray(targets, dtype=logits.dtype).reshape(logits.shape)
    z = logits.data
    # log(1 + exp(-|z|)) keeps large logits finite
    loss_el = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    loss = np.asarray(loss_el.mean(), dtype=logits.dtype)
    n = z.size

    def backward(g):
        return ((0.5 * (1.0 + np.tanh(0.5 * z)) - y) * (g / n),)

    return make_result(loss, (logits,), backward, "bce_with_logits")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """tanh approximation of GELU."""
    x = as_tensor(x)
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return make_result(out, (x,), backward, "gelu")


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; gradients scatter-add back into the table."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return make_result(out, (table,), backward, "embedding")


def dropout(x, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0.0 or rng is None:
        return as_tensor(x)
    x = as_tensor(x)
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return make_result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def l2_normalize(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _axis(x, axis)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norm == 0):
        bad = np.argwhere(norm.reshape(-1) == 0).reshape(-1).tolist()
        raise DegenerateVectorError(f"zero-norm vector(s) at index {bad}")
    out = x.data / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return make_result(out, (x,), backward, "l2_normalize")


def cosine_similarity(u, v) -> Tensor:
    """u·v / (‖u‖‖v‖) for two 1-d tensors."""
    u, v = as_tensor(u), as_tensor(v)
    if u.ndim != 1 or u.shape != v.shape:
        raise DimensionError(f"cosine_similarity needs equal 1-d vectors, got {u.shape}, {v.shape}")
    return (l2_normalize(u) * l2_normalize(v)).sum()


def cosine_matrix(a, b) -> Tensor:
    """Pairwise cosine similarity between the rows of ``a`` and ``b``."""
    return l2_normalize(a) @ l2_normalize(b).T
