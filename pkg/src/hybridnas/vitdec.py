"""Transformer branch over image patches and the U-shaped decoder."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .autodiff import Tensor
from .autodiff import functional as F
from .config import SupernetConfig
from .errors import ConfigurationError, HybridNASError


def transformer_param_specs(cfg: SupernetConfig) -> dict[str, tuple[tuple[int, ...], str]]:
    d, p = cfg.embed_dim, cfg.patch_size
    h, w = cfg.input_size
    tokens = (h // p) * (w // p)
    specs = {
        "vit.embed.k": ((d, cfg.in_channels, p, p), "lecun"),
        "vit.embed.b": ((d,), "zeros"),
        "vit.pos": ((tokens, d), "zeros"),
    }
    hidden = d * cfg.mlp_ratio
    for t in range(cfg.depth):
        pre = f"vit.t{t}"
        specs[f"{pre}.ln1.g"] = ((d,), "ones")
        specs[f"{pre}.ln1.b"] = ((d,), "zeros")
        for proj in ("q", "k", "v", "o"):
            specs[f"{pre}.{proj}.w"] = ((d, d), "normal02")
            specs[f"{pre}.{proj}.b"] = ((d,), "zeros")
        specs[f"{pre}.ln2.g"] = ((d,), "ones")
        specs[f"{pre}.ln2.b"] = ((d,), "zeros")
        specs[f"{pre}.mlp1.w"] = ((d, hidden), "normal02")
        specs[f"{pre}.mlp1.b"] = ((hidden,), "zeros")
        specs[f"{pre}.mlp2.w"] = ((hidden, d), "normal02")
        specs[f"{pre}.mlp2.b"] = ((d,), "zeros")
    return specs


def decoder_param_specs(cfg: SupernetConfig) -> dict[str, tuple[tuple[int, ...], str]]:
    res = sorted(cfg.final_resolutions(), reverse=True)
    specs: dict[str, tuple[tuple[int, ...], str]] = {}
    if cfg.head == "unet":
        coarse = res[0]
        specs["dec.adjust.k"] = ((cfg.width(coarse), cfg.embed_dim, 1, 1), "lecun")
        specs["dec.adjust.b"] = ((cfg.width(coarse),), "zeros")
        for s in res:
            out = cfg.width(max(4, s // 2))
            specs[f"dec.s{s}.k"] = ((out, 2 * cfg.width(s), 3, 3), "he")
            specs[f"dec.s{s}.b"] = ((out,), "zeros")
    else:
        cin = sum(cfg.width(s) for s in res)
        specs["dec.plain.k"] = ((cfg.width(4), cin, 3, 3), "he")
        specs["dec.plain.b"] = ((cfg.width(4),), "zeros")
    specs["dec.cls.k"] = ((cfg.num_classes, cfg.width(4), 1, 1), "lecun")
    specs["dec.cls.b"] = ((cfg.num_classes,), "zeros")
    return specs


# -- transformer ---------------------------------------------------------------------------

def tokenize(x: Tensor, patch: int, kernel: Tensor, bias: Tensor | None = None,
             pos: Tensor | None = None) -> Tensor:
    """P x P stride-P conv to D channels, flattened row-major to (N, HW/P^2, D)."""
    n, _, h, w = x.shape
    if h % patch or w % patch:
        raise ConfigurationError(f"image {(h, w)} not divisible by patch size {patch}")
    y = F.conv2d(x, kernel, stride=patch, bias=bias)
    d = y.shape[1]
    z = F.transpose(F.reshape(y, (n, d, -1)), (0, 2, 1))
    return z if pos is None else z + pos


def attention(z: Tensor, params: Mapping[str, Tensor], pre: str, heads: int,
              return_weights: bool = False):
    n, t, d = z.shape
    dh = d // heads

    def split(x):
        return F.transpose(F.reshape(x, (n, t, heads, dh)), (0, 2, 1, 3))

    q = split(F.linear(z, params[f"{pre}.q.w"], params[f"{pre}.q.b"]))
    k = split(F.linear(z, params[f"{pre}.k.w"], params[f"{pre}.k.b"]))
    v = split(F.linear(z, params[f"{pre}.v.w"], params[f"{pre}.v.b"]))
    scores = F.matmul(q, F.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    weights = F.softmax(scores, axis=-1)
    ctx = F.reshape(F.transpose(F.matmul(weights, v), (0, 2, 1, 3)), (n, t, d))
    out = F.linear(ctx, params[f"{pre}.o.w"], params[f"{pre}.o.b"])
    return (out, weights) if return_weights else out


def transformer_layer(z: Tensor, params: Mapping[str, Tensor], pre: str, heads: int) -> Tensor:
    """Pre-norm residual self-attention followed by a pre-norm residual GELU MLP."""
    a = F.layer_norm(z, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
    z = z + attention(a, params, pre, heads)
    m = F.layer_norm(z, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])
    m = F.linear(F.gelu(F.linear(m, params[f"{pre}.mlp1.w"], params[f"{pre}.mlp1.b"])),
                 params[f"{pre}.mlp2.w"], params[f"{pre}.mlp2.b"])
    return z + m


def transformer_stack(z: Tensor, params: Mapping[str, Tensor], depth: int, heads: int) -> Tensor:
    if depth < 1:
        raise ConfigurationError("transformer depth must be >= 1")
    for t in range(depth):
        z = transformer_layer(z, params, f"vit.t{t}", heads)
    return z


def tokens_to_map(z: Tensor, grid_hw: tuple[int, int]) -> Tensor:
    n, t, d = z.shape
    return F.reshape(F.transpose(z, (0, 2, 1)), (n, d) + tuple(grid_hw))


def global_branch(x: Tensor, params: Mapping[str, Tensor], cfg: SupernetConfig) -> Tensor:
    """Image -> (N, D, H/P, W/P) map of transformer features."""
    p = cfg.patch_size
    z = tokenize(x, p, params["vit.embed.k"], params["vit.embed.b"], params["vit.pos"])
    z = transformer_stack(z, params, cfg.depth, cfg.heads)
    return tokens_to_map(z, (x.shape[2] // p, x.shape[3] // p))


# -- decoder ----------------------------------------------------------------------------------

def resize_to(x: Tensor, hw: tuple[int, int]) -> Tensor:
    h = x.shape[2]
    if h == hw[0]:
        return x
    if hw[0] > h:
        return F.resample(x, hw[0] // h, "up")
    return F.resample(x, h // hw[0], "down")


def decode(features: Mapping[int, Tensor], zmap: Tensor | None, params: Mapping[str, Tensor],
           cfg: SupernetConfig, trace: list | None = None) -> Tensor:
    """Fuse multi-scale encoder features (and transformer map) into class logits.

    ``trace``, when given, collects the spatial size of the running state
    after every decoder step, ending with the full-resolution size.
    """
    res = sorted(cfg.final_resolutions(), reverse=True)
    missing = [s for s in res if s not in features]
    if missing:
        raise HybridNASError(f"decoder is missing encoder features at factors {missing}")
    h, w = cfg.input_size
    if cfg.head == "plain":
        ups = [resize_to(features[s], (h // 4, w // 4)) for s in res]
        state = F.relu(F.conv2d(F.concat(ups, axis=1), params["dec.plain.k"],
                                padding=1, bias=params["dec.plain.b"]))
    else:
        coarse = res[0]
        state = F.conv2d(zmap, params["dec.adjust.k"], bias=params["dec.adjust.b"])
        state = resize_to(state, (h // coarse, w // coarse))
        for s in res:
            state = resize_to(state, (h // s, w // s))
            state = F.concat([state, features[s]], axis=1)
            state = F.relu(F.conv2d(state, params[f"dec.s{s}.k"], padding=1, bias=params[f"dec.s{s}.b"]))
            if trace is not None:
                trace.append(state.shape[2])
    state = F.resample(state, 4, "up")
    if trace is not None:
        trace.append(state.shape[2])
    return F.conv2d(state, params["dec.cls.k"], bias=params["dec.cls.b"])
