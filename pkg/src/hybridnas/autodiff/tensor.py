"""Tensor value type and the reverse-mode graph machinery.

A ``Tensor`` wraps an immutable numpy array. Operations in
:mod:`hybridnas.autodiff.functional` create new tensors and, when any input
requires a gradient and recording is enabled, attach a :class:`Node` that
knows the parents and how to push an output adjoint back to them.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from ..errors import ValidationError

DEFAULT_DTYPE = np.float64

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording graph nodes (teacher passes, evaluation)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@dataclass
class Node:
    op: str
    parents: tuple["Tensor", ...]
    # maps the output adjoint to one adjoint per parent (None = no contribution)
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None,
                 _own: bool = False):
        if _own:
            arr = data
        else:
            arr = np.array(data, dtype=dtype, copy=True)
            if arr.dtype.kind != "f":
                arr = arr.astype(DEFAULT_DTYPE)
        arr.flags.writeable = False
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: Node | None = None
        self.name = name

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        op = f" op={self.node.op}" if self.node else ""
        return f"Tensor(shape={self.shape}{tag}{op})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def assign(self, value: np.ndarray) -> None:
        """Rebind the value of a leaf (optimizer updates); old arrays stay untouched."""
        if self.node is not None:
            raise ValidationError("only leaf tensors can be reassigned")
        arr = np.array(value, dtype=self.data.dtype, copy=True)
        if arr.shape != self.data.shape:
            raise ValidationError(f"assign: shape {arr.shape} != {self.data.shape}")
        arr.flags.writeable = False
        self.data = arr

    # -- operator sugar --------------------------------------------------------
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import functional as F
        return F.mul(self, -1.0)

    def __truediv__(self, other):
        from . import functional as F
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported")
        return F.mul(self, 1.0 / other)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)

    def sum(self):
        from . import functional as F
        return F.sum(self)

    def mean(self):
        from . import functional as F
        return F.mean(self)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes):
        from . import functional as F
        return F.transpose(self, axes)

    def backward(self, seed: np.ndarray | None = None) -> None:
        backward(self, seed)


def _raise_item(t: Tensor) -> float:
    raise ValidationError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(out_data: np.ndarray, parents: Sequence[Tensor], op: str,
              backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap ``out_data`` in a tensor, recording a graph node if any parent needs grad."""
    out = Tensor(np.asarray(out_data), _own=True)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, tuple(parents), backward_fn)
    return out


def topo_order(root: Tensor) -> list[Tensor]:
    """Graph nodes reachable from ``root``, parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in reversed(t.node.parents):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor, seed: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if seed is None:
        if loss.data.size != 1:
            raise ValidationError(f"backward() needs a scalar loss, got shape {loss.shape}")
        seed = np.ones_like(loss.data)
    if not loss.requires_grad:
        return
    order = topo_order(loss)
    adj: dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=loss.data.dtype)}
    for t in reversed(order):
        g = adj.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        grads = t.node.backward(g)
        for p, pg in zip(t.node.parents, grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in adj:
                adj[key] = adj[key] + pg
            else:
                adj[key] = pg
