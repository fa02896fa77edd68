"""The full segmentation network: searchable encoder, transformer branch, decoder."""

from __future__ import annotations

import zlib
from typing import Mapping

import numpy as np

from . import supernet, vitdec
from .autodiff import Tensor
from .config import SupernetConfig

GROUPS = ("w", "alpha", "gamma", "transformer", "decoder")

Params = dict  # name -> Tensor


def param_group(name: str) -> str:
    head = name.split(".", 1)[0]
    return {"enc": "w", "alpha": "alpha", "gamma": "gamma", "vit": "transformer",
            "dec": "decoder"}[head]


def optimizer_group(name: str) -> str:
    """Which optimizer owns a parameter: weights ``w``, ``alpha`` or ``gamma``."""
    g = param_group(name)
    return g if g in ("alpha", "gamma") else "w"


def _init(shape: tuple[int, ...], rule: str, rng: np.random.Generator) -> np.ndarray:
    if rule == "zeros":
        return np.zeros(shape)
    if rule == "ones":
        return np.ones(shape)
    if rule == "alpha":
        return 1e-3 * rng.standard_normal(shape)
    if rule == "normal02":
        return 0.02 * rng.standard_normal(shape)
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
    if rule == "he":
        return np.sqrt(2.0 / fan_in) * rng.standard_normal(shape)
    if rule == "lecun":
        return np.sqrt(1.0 / fan_in) * rng.standard_normal(shape)
    if rule == "identity":
        return np.eye(shape[0], shape[1]).reshape(shape)
    if rule == "fuse_avg":
        # output channel o averages channel o of every fused input
        out, cin = shape[:2]
        k = np.zeros((out, cin))
        parts = cin // out
        for b in range(parts):
            k[:, b * out:(b + 1) * out] += np.eye(out) / parts
        return k.reshape(shape)
    raise ValueError(f"unknown init rule {rule!r}")


class HybridSegNet:
    """Stateless network description; parameters live in a plain dict."""

    def __init__(self, cfg: SupernetConfig):
        self.cfg = cfg
        self.plan = supernet.build_plan(cfg)
        self.masks = supernet.build_masks(cfg)
        specs = dict(supernet.encoder_param_specs(cfg))
        if cfg.head == "unet":
            specs.update(vitdec.transformer_param_specs(cfg))
        specs.update(vitdec.decoder_param_specs(cfg))
        self.specs = specs

    def param_names(self) -> list[str]:
        return list(self.specs)

    def init_params(self, seed: int = 0, requires_grad: bool = True) -> Params:
        # one stream per parameter name keeps init stable when other specs change
        params = {}
        for name, (shape, rule) in self.specs.items():
            rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
            params[name] = Tensor(_init(shape, rule, rng), requires_grad=requires_grad, name=name)
        return params

    def encode(self, params: Mapping[str, Tensor], x: Tensor):
        return supernet.supernet_forward(x, params, self.cfg, self.masks)

    def forward(self, params: Mapping[str, Tensor], x: Tensor) -> Tensor:
        feats = self.encode(params, x)
        zmap = vitdec.global_branch(x, params, self.cfg) if self.cfg.head == "unet" else None
        return vitdec.decode(feats, zmap, params, self.cfg)

    __call__ = forward

    def count_parameters(self) -> dict[str, int]:
        counts = {g: 0 for g in GROUPS}
        for name, (shape, _) in self.specs.items():
            counts[param_group(name)] += int(np.prod(shape))
        counts["total"] = sum(counts[g] for g in GROUPS)
        return counts


def count_parameters(cfg: SupernetConfig) -> dict[str, int]:
    """Exact trainable scalar counts per group plus ``total``."""
    return HybridSegNet(cfg).count_parameters()
