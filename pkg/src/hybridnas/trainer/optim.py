"""SGD with momentum and Adam, operating on named leaf tensors."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..autodiff import Tensor
from ..errors import TrainingError


def _grad(name: str, p: Tensor) -> np.ndarray:
    if p.grad is None:
        raise TrainingError(f"parameter {name} has no gradient")
    return p.grad


@dataclass
class SGD:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 3e-4
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: Mapping[str, Tensor], lr: float | None = None) -> None:
        """``v <- momentum * v + g + wd * p``; ``p <- p - lr * v``."""
        lr = self.lr if lr is None else lr
        for name, p in params.items():
            g = _grad(name, p) + self.weight_decay * p.data
            v = self.buffers.get(name)
            v = g if v is None else self.momentum * v + g
            self.buffers[name] = v
            p.assign(p.data - lr * v)


@dataclass
class Adam:
    lr: float = 0.003
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-3
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: Mapping[str, Tensor], lr: float | None = None) -> None:
        """Bias-corrected Adam; weight decay is added to the gradient (L2, not decoupled)."""
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for name, p in params.items():
            g = _grad(name, p) + self.weight_decay * p.data
            m = b1 * self.m.get(name, 0.0) + (1.0 - b1) * g
            v = b2 * self.v.get(name, 0.0) + (1.0 - b2) * g * g
            self.m[name], self.v[name] = m, v
            p.assign(p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps))


def sgd_step(params: Mapping[str, Tensor], state: SGD, lr: float | None = None) -> None:
    state.step(params, lr)


def adam_step(params: Mapping[str, Tensor], state: Adam, lr: float | None = None) -> None:
    state.step(params, lr)


def cosine_lr(epoch: int, total: int, lr_max: float, lr_min: float) -> float:
    """Cosine decay from ``lr_max`` at epoch 0 towards ``lr_min`` at ``total``."""
    if total <= 0:
        return lr_max
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * min(epoch, total) / total))
