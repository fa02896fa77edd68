"""Searchable inner cell: mixed edges over a fixed op set with partial channels.

A cell has ``B`` blocks. Block ``i`` (0-based) reads from ``2 + i`` sources:
source 0 is the previous cell output, source 1 the one before it, and
source ``2 + j`` is block ``j`` of the same cell. Every (source, block) edge
mixes the candidate ops with softmax weights over its row of the
architecture logits, applied to a ``1/n`` channel slice; the remaining
channels of the source pass through untouched.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autodiff import Tensor
from .autodiff import functional as F
from .errors import ConfigurationError, DimensionError, ValidationError

OPS: tuple[str, ...] = (
    "sep_conv_3x3",
    "dil_conv_3x3",
    "avg_pool_3x3",
    "max_pool_3x3",
    "skip_connect",
    "none",
)
NONE_INDEX = OPS.index("none")


def edge_list(blocks: int) -> list[tuple[int, int]]:
    """(block, source) pairs in the row order of the alpha matrix."""
    return [(i, j) for i in range(blocks) for j in range(2 + i)]


def num_edges(blocks: int) -> int:
    return blocks * (blocks + 3) // 2


def alpha_size(blocks: int) -> int:
    return num_edges(blocks) * len(OPS)


# -- partial channel connections -------------------------------------------------

@dataclass(frozen=True)
class PartialMask:
    """Which ``channels / n`` channels of a source enter the mixed ops."""

    channels: int
    n: int
    selected: tuple[int, ...]

    def __post_init__(self):
        if self.n < 1 or self.channels % self.n:
            raise ConfigurationError(
                f"channel count {self.channels} is not divisible by partial divisor n={self.n}")
        if len(self.selected) != self.channels // self.n or len(set(self.selected)) != len(self.selected):
            raise ConfigurationError(f"mask must select exactly {self.channels // self.n} channels")
        if any(c < 0 or c >= self.channels for c in self.selected):
            raise ConfigurationError("mask selects a channel out of range")

    @classmethod
    def first(cls, channels: int, n: int) -> "PartialMask":
        if n < 1 or channels % n:
            raise ConfigurationError(
                f"channel count {channels} is not divisible by partial divisor n={n}")
        return cls(channels, n, tuple(range(channels // n)))

    @classmethod
    def random(cls, channels: int, n: int, rng: np.random.Generator) -> "PartialMask":
        if n < 1 or channels % n:
            raise ConfigurationError(
                f"channel count {channels} is not divisible by partial divisor n={n}")
        pick = np.sort(rng.choice(channels, channels // n, replace=False))
        return cls(channels, n, tuple(int(c) for c in pick))

    @property
    def passthrough(self) -> tuple[int, ...]:
        chosen = set(self.selected)
        return tuple(c for c in range(self.channels) if c not in chosen)

    @property
    def is_leading(self) -> bool:
        return self.selected == tuple(range(len(self.selected)))

    def as_bool(self) -> np.ndarray:
        m = np.zeros(self.channels, dtype=bool)
        m[list(self.selected)] = True
        return m


def partial_channel_split(x: Tensor, mask: PartialMask) -> tuple[Tensor, Tensor | None]:
    if x.shape[1] != mask.channels:
        raise DimensionError(f"mask built for {mask.channels} channels, input has shape {x.shape}")
    k = len(mask.selected)
    if mask.is_leading:
        sel = F.take(x, slice(0, k), axis=1)
        rest = F.take(x, slice(k, mask.channels), axis=1) if k < mask.channels else None
    else:
        sel = F.take(x, mask.selected, axis=1)
        rest = F.take(x, mask.passthrough, axis=1)
    return sel, rest


def recombine(selected: Tensor, passthrough: Tensor | None, mask: PartialMask) -> Tensor:
    """Inverse of :func:`partial_channel_split`."""
    if passthrough is None:
        return selected
    joined = F.concat([selected, passthrough], axis=1)
    if mask.is_leading:
        return joined
    order = list(mask.selected) + list(mask.passthrough)
    return F.take(joined, list(np.argsort(order)), axis=1)


# -- candidate operations -----------------------------------------------------------

def op_param_shapes(op: str, c: int) -> dict[str, tuple[int, ...]]:
    if op == "sep_conv_3x3":
        return {"dw": (c, 1, 3, 3), "pw": (c, c, 1, 1)}
    if op == "dil_conv_3x3":
        return {"k": (c, c, 3, 3)}
    return {}


def apply_op(op: str, x: Tensor, weights: Mapping[str, Tensor]) -> Tensor:
    if op == "sep_conv_3x3":
        return F.depthwise_separable_conv(F.relu(x), weights["dw"], weights["pw"])
    if op == "dil_conv_3x3":
        return F.conv2d(F.relu(x), weights["k"], dilation=2, padding=2)
    if op == "avg_pool_3x3":
        return F.pool2d(x, "avg", 3, 1, 1)
    if op == "max_pool_3x3":
        return F.pool2d(x, "max", 3, 1, 1)
    if op == "skip_connect":
        return x
    if op == "none":
        return Tensor(np.zeros(x.shape, dtype=x.dtype))
    raise ValidationError(f"unknown op {op!r}")


def mixed_edge_forward(h: Tensor, alpha_edge: Tensor, mask: PartialMask,
                       weights: Mapping[str, Mapping[str, Tensor]]) -> Tensor:
    """Softmax(alpha)-weighted sum of every op on the masked slice, rest passed through.

    ``weights`` maps op name to that op's parameters on this edge.
    """
    sel, rest = partial_channel_split(h, mask)
    w = F.softmax(alpha_edge, axis=-1)
    outs = [apply_op(op, sel, weights.get(op, {})) for op in OPS]
    return recombine(F.mix(w, outs), rest, mask)


def cell_forward(h_prev: Tensor, h_prevprev: Tensor, alpha: Tensor, masks: Mapping[tuple[int, int], PartialMask],
                 weights: Mapping[tuple[int, int], Mapping[str, Mapping[str, Tensor]]],
                 blocks: int) -> Tensor:
    """Run all blocks and concatenate their outputs along channels.

    ``alpha`` has one row per edge in :func:`edge_list` order; ``masks`` and
    ``weights`` are keyed by (block, source).
    """
    if h_prev.shape != h_prevprev.shape:
        raise DimensionError(
            f"cell inputs disagree: previous {h_prev.shape} vs previous-previous {h_prevprev.shape}")
    if alpha.shape != (num_edges(blocks), len(OPS)):
        raise DimensionError(f"alpha shape {alpha.shape} does not fit B={blocks}")
    states = [h_prev, h_prevprev]
    row = 0
    for i in range(blocks):
        acc = None
        for j in range(2 + i):
            src = states[j]
            if src.shape != h_prev.shape:
                raise DimensionError(f"source {j} of block {i} has shape {src.shape}, expected {h_prev.shape}")
            a = F.take(alpha, slice(row, row + 1), axis=0).reshape(len(OPS))
            out = mixed_edge_forward(src, a, masks[(i, j)], weights[(i, j)])
            acc = out if acc is None else acc + out
            row += 1
        states.append(acc)
    return F.concat(states[2:], axis=1)


# -- genotype ------------------------------------------------------------------------

@dataclass
class Genotype:
    """Per block, the kept (source, op) pairs."""

    blocks: list[list[tuple[int, str]]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"blocks": [[{"src": s, "op": op} for s, op in blk] for blk in self.blocks]}

    @classmethod
    def from_dict(cls, d: dict) -> "Genotype":
        g = cls([[(int(e["src"]), str(e["op"])) for e in blk] for blk in d["blocks"]])
        g.validate()
        return g

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def validate(self) -> None:
        for i, blk in enumerate(self.blocks):
            for s, op in blk:
                if not 0 <= s < 2 + i:
                    raise ValidationError(f"block {i} references inadmissible source {s}")
                if op not in OPS:
                    raise ValidationError(f"unknown op {op!r} in genotype")


def _softmax_rows(a: np.ndarray) -> np.ndarray:
    z = a - a.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def derive_genotype(alpha, blocks: int, retain_per_block: int = 2) -> Genotype:
    """Discretise alpha: top edges per block by strongest non-``none`` weight."""
    if retain_per_block < 1:
        raise ValidationError("retain_per_block must be >= 1")
    a = np.asarray(alpha.data if isinstance(alpha, Tensor) else alpha, dtype=np.float64)
    if a.shape != (num_edges(blocks), len(OPS)):
        raise DimensionError(f"alpha shape {a.shape} does not fit B={blocks}")
    w = _softmax_rows(a)
    w[:, NONE_INDEX] = -np.inf
    out = []
    row = 0
    for i in range(blocks):
        cand = []
        for j in range(2 + i):
            ops = w[row]
            best_op = int(np.argmax(ops))  # first index wins ties
            cand.append((-ops[best_op], j, best_op))
            row += 1
        cand.sort()
        kept = sorted(cand[:retain_per_block], key=lambda t: t[1])
        out.append([(j, OPS[k]) for _, j, k in kept])
    return Genotype(out)
