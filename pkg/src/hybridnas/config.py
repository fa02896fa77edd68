"""Structural hyperparameters of the network."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from .errors import ConfigurationError

FUSION_MODES = ("conv", "scalar")
HEAD_MODES = ("unet", "plain")
ALPHA_MODES = ("resolution", "shared", "cell")
MASK_MODES = ("first", "random")


@dataclass
class SupernetConfig:
    layers: int = 4
    filter_multiplier: int = 8
    blocks: int = 5
    partial_n: int = 4
    resolutions: tuple[int, ...] = (4, 8, 16, 32)
    num_classes: int = 4
    in_channels: int = 1
    input_size: tuple[int, int] = (64, 64)
    patch_size: int = 8
    embed_dim: int = 64
    heads: int = 4
    depth: int = 4
    mlp_ratio: int = 4
    fusion: str = "conv"
    head: str = "unet"
    alpha_mode: str = "resolution"
    mask_mode: str = "first"
    mask_seed: int = 0

    def __post_init__(self):
        self.resolutions = tuple(int(s) for s in self.resolutions)
        self.input_size = tuple(int(v) for v in self.input_size)
        self.validate()

    def width(self, s: int) -> int:
        """Channels of a feature map at downsample factor ``s``."""
        return self.blocks * self.filter_multiplier * s // 4

    def block_width(self, s: int) -> int:
        return self.filter_multiplier * s // 4

    def active(self, layer: int) -> tuple[int, ...]:
        """Resolutions present at ``layer``; stem layers (<= 0) only carry s=4."""
        return self.resolutions[:max(1, min(layer, len(self.resolutions)))]

    def final_resolutions(self) -> tuple[int, ...]:
        return self.active(self.layers)

    def validate(self) -> None:
        if self.layers < 0:
            raise ConfigurationError("layers must be >= 0")
        if self.blocks < 1 or self.filter_multiplier < 1:
            raise ConfigurationError("blocks and filter_multiplier must be >= 1")
        if not self.resolutions or self.resolutions[0] != 4:
            raise ConfigurationError("resolutions must start at factor 4")
        for a, b in zip(self.resolutions, self.resolutions[1:]):
            if b != 2 * a:
                raise ConfigurationError(f"resolutions must double: got {self.resolutions}")
        h, w = self.input_size
        biggest = max(self.resolutions)
        if h % biggest or w % biggest:
            raise ConfigurationError(f"input size {self.input_size} not divisible by {biggest}")
        if h % self.patch_size or w % self.patch_size:
            raise ConfigurationError(f"input size {self.input_size} not divisible by patch {self.patch_size}")
        p = self.patch_size
        if p & (p - 1):
            raise ConfigurationError("patch_size must be a power of two")
        for s in self.resolutions:
            if self.block_width(s) % self.partial_n:
                raise ConfigurationError(
                    f"block width {self.block_width(s)} at s={s} not divisible by n={self.partial_n}")
        if self.embed_dim % self.heads:
            raise ConfigurationError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        for name, value, allowed in (("fusion", self.fusion, FUSION_MODES),
                                     ("head", self.head, HEAD_MODES),
                                     ("alpha_mode", self.alpha_mode, ALPHA_MODES),
                                     ("mask_mode", self.mask_mode, MASK_MODES)):
            if value not in allowed:
                raise ConfigurationError(f"{name} must be one of {allowed}, got {value!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolutions"] = list(self.resolutions)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SupernetConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown supernet config keys: {sorted(unknown)}")
        return cls(**d)


def desk_config(**overrides) -> SupernetConfig:
    """The small CPU configuration used by the acceptance runs."""
    base = dict(layers=2, filter_multiplier=4, blocks=3, input_size=(64, 64), patch_size=8,
                embed_dim=64, heads=4, depth=4)
    base.update(overrides)
    return SupernetConfig(**base)


__all__ = ["SupernetConfig", "desk_config", "FUSION_MODES", "HEAD_MODES", "ALPHA_MODES",
           "MASK_MODES"]
