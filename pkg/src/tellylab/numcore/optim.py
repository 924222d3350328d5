"""Named parameters and the Adam optimizer."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .tensor import Tensor


class OptimizerStateError(RuntimeError):
    """Optimizer state is missing or inconsistent with the parameter set."""


class Parameter:
    """A named leaf tensor. ``trainable`` controls whether gradients reach it."""

    __slots__ = ("name", "value")

    def __init__(self, name: str, value, trainable: bool = True):
        self.name = name
        self.value = value if isinstance(value, Tensor) else Tensor(value)
        self.value.requires_grad = trainable

    @property
    def trainable(self) -> bool:
        return self.value.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.value.requires_grad = bool(flag)
        if not flag:
            self.value.grad = None

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def grad(self):
        return self.value.grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def checksum(params: Iterable[Parameter]) -> str:
    """sha256 over names, shapes and raw bytes; order-sensitive."""
    h = hashlib.sha256()
    for p in params:
        h.update(p.name.encode())
        h.update(str(p.shape).encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


@dataclass
class AdamSlot:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


@dataclass
class AdamState:
    slots: dict[str, AdamSlot] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Iterable[Parameter]) -> "AdamState":
        return cls({p.name: AdamSlot(np.zeros_like(p.data), np.zeros_like(p.data))
                    for p in params if p.trainable})


def adam_step(params: Iterable[Parameter], state: AdamState, lr: float = 1e-4,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """One bias-corrected Adam update of every trainable parameter that has a gradient.

    Frozen parameters are skipped without touching their storage.
    """
    b1, b2 = betas
    for p in params:
        if not p.trainable or p.grad is None:
            continue
        slot = state.slots.get(p.name)
        if slot is None:
            raise OptimizerStateError(f"no Adam state for trainable parameter {p.name!r}")
        g = p.grad
        slot.t += 1
        slot.m *= b1
        slot.m += (1.0 - b1) * g
        slot.v *= b2
        slot.v += (1.0 - b2) * (g * g)
        m_hat = slot.m / (1.0 - b1 ** slot.t)
        v_hat = slot.v / (1.0 - b2 ** slot.t)
        p.value.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype, copy=False)


class Adam:
    def __init__(self, params: Iterable[Parameter], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.state = AdamState.for_params(self.params)

    def step(self) -> None:
        adam_step(self.params, self.state, self.lr, self.betas, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.value.grad = None
