"""Central-difference gradient oracle."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import ValidationError
from .tensor import Tensor


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
               samples: int = 32, seed: int = 0) -> float:
    """Max relative error between backprop and central differences.

    ``f`` rebuilds the scalar loss from the current values of ``params``. For
    each parameter up to ``samples`` coordinates are probed (all of them when
    the tensor is smaller). The error of one coordinate is
    ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.grad = None
    loss = f()
    if not np.isfinite(loss.data).all():
        raise ValidationError(f"grad_check: loss is not finite ({loss.data})")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for pi, p in enumerate(params):
        size = p.data.size
        coords = np.arange(size) if size <= samples else rng.choice(size, samples, replace=False)
        base = p.data.copy()
        for c in coords:
            flat = base.reshape(-1).copy()
            flat[c] = base.reshape(-1)[c] + eps
            p.assign(flat.reshape(base.shape))
            up = float(f().data)
            flat[c] = base.reshape(-1)[c] - eps
            p.assign(flat.reshape(base.shape))
            down = float(f().data)
            p.assign(base)
            if not (np.isfinite(up) and np.isfinite(down)):
                where = np.unravel_index(int(c), base.shape)
                raise ValidationError(
                    f"grad_check: non-finite loss probing parameter {p.name or pi} at {where}")
            numeric = (up - down) / (2.0 * eps)
            a = float(analytic[pi].reshape(-1)[c])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst
