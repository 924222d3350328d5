"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteError, Tensor


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_leaves(loss_fn: Callable[[], Tensor], leaves: Sequence[Tensor], *,
                 step: float = 1e-4, num_samples: int | None = None,
                 rng: np.random.Generator | None = None, floor: float = 1e-8) -> float:
    """Max relative error between backprop and central differences.

    ``loss_fn`` closes over ``leaves`` (float64 tensors requiring grad) and
    returns a scalar. With ``num_samples`` set, that many coordinates are drawn
    uniformly over all leaves; otherwise every coordinate is checked.
    """
    for leaf in leaves:
        if leaf.dtype != np.float64:
            raise TypeError("gradient checks require 64-bit tensors")
        leaf.grad = None
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("loss is not finite at the check point")
    loss.backward()
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

    coords = [(i, j) for i, leaf in enumerate(leaves) for j in range(leaf.size)]
    if num_samples is not None and num_samples < len(coords):
        rng = rng or np.random.default_rng(0)
        picks = rng.choice(len(coords), size=num_samples, replace=False)
        coords = [coords[k] for k in sorted(picks)]

    worst = 0.0
    for i, j in coords:
        flat = leaves[i].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + step
        up = float(loss_fn().data)
        flat[j] = orig - step
        down = float(loss_fn().data)
        flat[j] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NonFiniteError(f"non-finite loss while perturbing coordinate {j} of leaf {i}")
        numeric = (up - down) / (2 * step)
        worst = max(worst, relative_error(float(analytic[i].reshape(-1)[j]), numeric, floor))
    return worst


def grad_check(f: Callable[..., Tensor], point, **kwargs) -> float:
    """Check ``f`` at ``point`` (an array or a sequence of arrays)."""
    arrays = [point] if isinstance(point, np.ndarray) or np.isscalar(point) else list(point)
    leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    return check_leaves(lambda: f(*leaves), leaves, **kwargs)
