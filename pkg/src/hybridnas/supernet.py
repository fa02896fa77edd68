"""Layer-level search grid: stem, per-resolution cells, convolutional fusion.

Feature maps are indexed by (layer, factor). The stem provides layers -1
and 0 at factor 4; search layers start at 1. At each layer a factor ``s``
is fed by up to three cells (from ``s/2`` then downsampled, from ``s``,
from ``2s`` then upsampled) and by every earlier same-factor layer output.
Those inputs are concatenated and fused by a 1x1 convolution (``gamma``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import cell as cellmod
from .autodiff import Tensor
from .autodiff import functional as F
from .config import SupernetConfig
from .errors import ConfigurationError, DimensionError, HybridNASError

BRANCHES = ("down", "same", "up")

FeatureGrid = dict  # (layer, factor) -> Tensor


@dataclass(frozen=True)
class Branch:
    kind: str
    work: int  # factor the cell runs at
    prev: tuple[int, int]
    prevprev: tuple[int, int]


@dataclass(frozen=True)
class LayerNode:
    layer: int
    s: int
    branches: tuple[Branch, ...]
    skips: tuple[int, ...]  # earlier layers at the same factor

    def fusion_inputs(self) -> int:
        return len(self.branches) + len(self.skips)


def available(cfg: SupernetConfig, layer: int, s: int) -> bool:
    if layer in (-1, 0):
        return s == 4
    return 1 <= layer and s in cfg.active(layer)


def build_plan(cfg: SupernetConfig) -> list[list[LayerNode]]:
    """Connectivity of every search layer, outer list indexed by layer - 1."""
    plan = []
    for l in range(1, cfg.layers + 1):
        nodes = []
        for s in cfg.active(l):
            if available(cfg, l - 2, s):
                pp = (l - 2, s)
            else:
                # s only just became active: fall back to the finer map that spawned it
                pp = (l - 1, s // 2)
            branches = []
            if s // 2 >= 4 and available(cfg, l - 1, s // 2):
                branches.append(Branch("down", s // 2, (l - 1, s // 2), pp))
            if available(cfg, l - 1, s):
                branches.append(Branch("same", s, (l - 1, s), pp))
            if available(cfg, l - 1, 2 * s):
                branches.append(Branch("up", 2 * s, (l - 1, 2 * s), pp))
            skips = tuple(lp for lp in range(1, l) if available(cfg, lp, s))
            nodes.append(LayerNode(l, s, tuple(branches), skips))
        plan.append(nodes)
    return plan


def cell_prefix(l: int, s: int, kind: str) -> str:
    return f"enc.l{l}.s{s}.{kind}"


def alpha_key(cfg: SupernetConfig, l: int, s: int, kind: str) -> str:
    if cfg.alpha_mode == "shared":
        return "alpha.shared"
    if cfg.alpha_mode == "resolution":
        return f"alpha.s{s}"
    return f"alpha.l{l}.s{s}.{kind}"


def encoder_param_specs(cfg: SupernetConfig) -> dict[str, tuple[tuple[int, ...], str]]:
    """name -> (shape, init rule) for stem, cells, alpha and gamma."""
    specs: dict[str, tuple[tuple[int, ...], str]] = {}
    w4 = cfg.width(4)
    mid = max(1, w4 // 2)
    specs["enc.stem.c1"] = ((mid, cfg.in_channels, 3, 3), "he")
    specs["enc.stem.c2"] = ((w4, mid, 3, 3), "he")
    specs["enc.stem.c3"] = ((w4, w4, 3, 3), "he")
    n_alpha = (cellmod.num_edges(cfg.blocks), len(cellmod.OPS))
    for nodes in build_plan(cfg):
        for node in nodes:
            bw = cfg.block_width(node.s)
            c_sel = bw // cfg.partial_n
            for br in node.branches:
                pre = cell_prefix(node.layer, node.s, br.kind)
                for tag, src in (("pre0", br.prev), ("pre1", br.prevprev)):
                    cin = cfg.width(src[1])
                    specs[f"{pre}.{tag}"] = ((bw, cin, 1, 1), "identity" if cin == bw else "lecun")
                for i, j in cellmod.edge_list(cfg.blocks):
                    for op in cellmod.OPS:
                        for pname, shape in cellmod.op_param_shapes(op, c_sel).items():
                            specs[f"{pre}.e{i}_{j}.{op}.{pname}"] = (shape, "he")
                specs.setdefault(alpha_key(cfg, node.layer, node.s, br.kind), (n_alpha, "alpha"))
            if cfg.fusion == "conv":
                w = cfg.width(node.s)
                specs[f"gamma.l{node.layer}.s{node.s}"] = ((w, w * node.fusion_inputs(), 1, 1), "fuse_avg")
    return specs


def build_masks(cfg: SupernetConfig) -> dict[str, dict[tuple[int, int], cellmod.PartialMask]]:
    """Partial-channel masks for every cell, keyed by cell prefix then (block, source)."""
    masks = {}
    for nodes in build_plan(cfg):
        for node in nodes:
            bw = cfg.block_width(node.s)
            for br in node.branches:
                pre = cell_prefix(node.layer, node.s, br.kind)
                if cfg.mask_mode == "first":
                    m = cellmod.PartialMask.first(bw, cfg.partial_n)
                    masks[pre] = {e: m for e in cellmod.edge_list(cfg.blocks)}
                else:
                    rng = np.random.default_rng([cfg.mask_seed, node.layer, node.s, BRANCHES.index(br.kind)])
                    masks[pre] = {e: cellmod.PartialMask.random(bw, cfg.partial_n, rng)
                                  for e in cellmod.edge_list(cfg.blocks)}
    return masks


# -- forward pieces ---------------------------------------------------------------------

def stem(x: Tensor, params: Mapping[str, Tensor], cfg: SupernetConfig) -> tuple[Tensor, Tensor]:
    """Two stride-2 convs to factor 4, then one more conv at that factor."""
    h, w = x.shape[2:]
    if h % 4 or w % 4:
        raise ConfigurationError(f"stem needs spatial dims divisible by 4, got {(h, w)}")
    y = F.relu(F.conv2d(x, params["enc.stem.c1"], stride=2, padding=1))
    h_m1 = F.conv2d(y, params["enc.stem.c2"], stride=2, padding=1)
    h_0 = F.conv2d(F.relu(h_m1), params["enc.stem.c3"], padding=1)
    return h_m1, h_0


def preprocess(src: Tensor, src_s: int, target_s: int, kernel: Tensor) -> Tensor:
    """Resample ``src`` from factor ``src_s`` to ``target_s`` then project with a 1x1 conv."""
    if src_s == target_s:
        y = src
    elif src_s == 2 * target_s:
        y = F.resample(src, 2, "up")
    elif 2 * src_s == target_s:
        y = F.resample(src, 2, "down")
    else:
        raise DimensionError(f"preprocess supports factor ratios 1/2, 1, 2; got {src_s} -> {target_s}")
    return F.conv2d(y, kernel)


def _cell_weights(params: Mapping[str, Tensor], pre: str, blocks: int):
    out = {}
    for i, j in cellmod.edge_list(blocks):
        out[(i, j)] = {op: {p: params[f"{pre}.e{i}_{j}.{op}.{p}"] for p in cellmod.op_param_shapes(op, 1)}
                       for op in cellmod.OPS}
    return out


def layer_forward(grid: FeatureGrid, node: LayerNode, params: Mapping[str, Tensor],
                  cfg: SupernetConfig, masks) -> Tensor:
    parts = []
    for br in node.branches:
        for key in (br.prev, br.prevprev):
            if key not in grid:
                raise HybridNASError(f"feature ({key[0]}, s={key[1]}) missing for layer {node.layer}")
        pre = cell_prefix(node.layer, node.s, br.kind)
        h1 = preprocess(grid[br.prev], br.prev[1], br.work, params[f"{pre}.pre0"])
        h2 = preprocess(grid[br.prevprev], br.prevprev[1], br.work, params[f"{pre}.pre1"])
        alpha = params[alpha_key(cfg, node.layer, node.s, br.kind)]
        out = cellmod.cell_forward(h1, h2, alpha, masks[pre], _cell_weights(params, pre, cfg.blocks),
                                   cfg.blocks)
        if br.kind == "down":
            out = F.resample(out, 2, "down")
        elif br.kind == "up":
            out = F.resample(out, 2, "up")
        parts.append(out)
    for lp in node.skips:
        parts.append(grid[(lp, node.s)])
    if cfg.fusion == "conv":
        return F.conv2d(F.concat(parts, axis=1), params[f"gamma.l{node.layer}.s{node.s}"])
    acc = parts[0]
    for p in parts[1:]:
        acc = acc + p
    return acc * (1.0 / len(parts))


def supernet_forward(x: Tensor, params: Mapping[str, Tensor], cfg: SupernetConfig, masks,
                     return_grid: bool = False):
    """Final-layer features for every active factor, ``{s: tensor}``."""
    h, w = x.shape[2:]
    if (h, w) != tuple(cfg.input_size) or x.shape[1] != cfg.in_channels:
        raise DimensionError(f"input {x.shape} does not match config "
                             f"(C={cfg.in_channels}, size={tuple(cfg.input_size)})")
    grid: FeatureGrid = {}
    grid[(-1, 4)], grid[(0, 4)] = stem(x, params, cfg)
    for nodes in build_plan(cfg):
        for node in nodes:
            grid[(node.layer, node.s)] = layer_forward(grid, node, params, cfg, masks)
    last = max(cfg.layers, 0)
    feats = {s: grid[(last, s)] for s in cfg.final_resolutions()}
    return (feats, grid) if return_grid else feats


def count_parameters(cfg: SupernetConfig) -> dict[str, int]:
    from .network import count_parameters as _count
    return _count(cfg)
