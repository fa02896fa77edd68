"""Synthetic echo-like segmentation data and the on-disk dataset manifest.

Each image shows a dark elliptical cavity (class 1) wrapped in a bright
muscle ring (class 2) with a second, mid-grey chamber (class 3) attached
below, over a noisy background (class 0). Images carry multiplicative
speckle, soft edges and a smooth illumination gradient.
"""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff.serialize import load_tensor, save_tensor
from .errors import ConfigurationError, ValidationError

NUM_CLASSES = 4
CLASS_NAMES = ("background", "lv_endocardium", "myocardium", "left_atrium")
_INTENSITY = (0.12, 0.32, 0.85, 0.55)


@dataclass
class DatasetManifest:
    root: Path
    size: int
    classes: int
    labeled: list[str]
    unlabeled: list[str]
    seed: int

    def to_dict(self) -> dict:
        return {"size": self.size, "classes": self.classes, "labeled": list(self.labeled),
                "unlabeled": list(self.unlabeled), "seed": self.seed}

    def image_path(self, sid: str) -> Path:
        return self.root / f"{sid}.img.tns"

    def mask_path(self, sid: str) -> Path:
        return self.root / f"{sid}.mask.tns"

    def check(self) -> None:
        overlap = set(self.labeled) & set(self.unlabeled)
        if overlap:
            raise ValidationError(f"ids both labeled and unlabeled: {sorted(overlap)[:5]}")
        for sid in self.labeled + self.unlabeled:
            if not self.image_path(sid).exists():
                raise ValidationError(f"missing image file for sample {sid}")
        for sid in self.labeled:
            if not self.mask_path(sid).exists():
                raise ValidationError(f"missing mask file for labeled sample {sid}")


def write_manifest(manifest: DatasetManifest) -> Path:
    path = Path(manifest.root) / "manifest.json"
    path.write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path: str | os.PathLike) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        d = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ValidationError(f"manifest not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"manifest {path} is not valid JSON: {exc}") from exc
    missing = {"size", "classes", "labeled", "unlabeled", "seed"} - set(d)
    if missing:
        raise ValidationError(f"manifest {path} lacks keys {sorted(missing)}")
    return DatasetManifest(path.parent, int(d["size"]), int(d["classes"]), list(d["labeled"]),
                           list(d["unlabeled"]), int(d["seed"]))


# -- generator -------------------------------------------------------------------------

def _ellipse_radius(xx, yy, cx, cy, a, b, theta):
    """Normalised elliptical radius (1 on the boundary); ``a`` runs along ``theta``."""
    c, s = np.cos(theta), np.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return np.sqrt((u / a) ** 2 + (v / b) ** 2)


def _soft(r, scale, width=0.8):
    """Smooth inside-indicator of ``r <= 1`` with an edge about ``width`` pixels wide."""
    return 1.0 / (1.0 + np.exp((r - 1.0) * scale / width))


def render_sample(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    """One (image[1,H,W] in [0,1], mask[H,W] int) pair."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    theta = np.pi / 2 + rng.uniform(-0.35, 0.35)  # long axis roughly vertical
    a = size * rng.uniform(0.19, 0.23)
    b = size * rng.uniform(0.13, 0.16)
    t = size * rng.uniform(0.09, 0.11)
    cx = size * (0.5 + rng.uniform(-0.05, 0.05))
    cy = size * (0.36 + rng.uniform(-0.03, 0.03))
    r_lv = _ellipse_radius(xx, yy, cx, cy, a, b, theta)
    r_myo = _ellipse_radius(xx, yy, cx, cy, a + t, b + t, theta)
    # atrium sits beyond the ring along the long axis
    la_a = size * rng.uniform(0.13, 0.16)
    la_b = size * rng.uniform(0.13, 0.16)
    off = a + t + 0.75 * la_a
    lx, ly = cx + off * np.cos(theta), cy + off * np.sin(theta)
    r_la = _ellipse_radius(xx, yy, lx, ly, la_a, la_b, theta)

    mask = np.zeros((size, size), dtype=np.int64)
    mask[r_la <= 1.0] = 3
    mask[r_myo <= 1.0] = 2
    mask[r_lv <= 1.0] = 1

    lv = _soft(r_lv, b)
    myo = _soft(r_myo, b + t) * (1.0 - lv)
    la = _soft(r_la, la_b) * (1.0 - _soft(r_myo, b + t))
    bg = np.clip(1.0 - lv - myo - la, 0.0, 1.0)
    jitter = rng.uniform(-0.04, 0.04, size=4)
    img = sum(w * (i + j) for w, i, j in zip((bg, lv, myo, la), _INTENSITY, jitter))
    ang = rng.uniform(0, 2 * np.pi)
    ramp = ((xx - size / 2) * np.cos(ang) + (yy - size / 2) * np.sin(ang)) / size
    img = img * (1.0 + 0.4 * ramp)
    speckle = rng.gamma(shape=12.0, scale=1.0 / 12.0, size=img.shape)
    img = img * speckle + 0.02 * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)[None], mask


def sample_rng(seed: int, sid: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(sid.encode())])


def gen_toy_dataset(seed: int, n_labeled: int, n_unlabeled: int, size: int,
                    out_dir: str | os.PathLike, patch_size: int = 8) -> DatasetManifest:
    if size % 32 or size % patch_size:
        raise ConfigurationError(f"image size {size} must be divisible by 32 and by patch size {patch_size}")
    if n_labeled < 0 or n_unlabeled < 0:
        raise ConfigurationError("sample counts must be non-negative")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    labeled = [f"L{i:04d}" for i in range(n_labeled)]
    unlabeled = [f"U{i:04d}" for i in range(n_unlabeled)]
    for sid in labeled + unlabeled:
        img, mask = render_sample(sample_rng(seed, sid), size)
        save_tensor(root / f"{sid}.img.tns", img.astype(np.float32))
        if sid in labeled:
            save_tensor(root / f"{sid}.mask.tns", mask.astype(np.float32))
    manifest = DatasetManifest(root, size, NUM_CLASSES, labeled, unlabeled, seed)
    write_manifest(manifest)
    return manifest


@dataclass
class InMemoryDataset:
    """Images and masks of a manifest loaded as float64/int arrays."""

    manifest: DatasetManifest
    images: dict[str, np.ndarray] = field(default_factory=dict)
    masks: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def load(cls, manifest: DatasetManifest) -> "InMemoryDataset":
        manifest.check()
        ds = cls(manifest)
        for sid in manifest.labeled + manifest.unlabeled:
            ds.images[sid] = load_tensor(manifest.image_path(sid)).astype(np.float64)
        for sid in manifest.labeled:
            m = load_tensor(manifest.mask_path(sid))
            if m.min() < 0 or m.max() >= manifest.classes or not np.all(m == np.round(m)):
                raise ValidationError(f"mask {sid} holds values outside 0..{manifest.classes - 1}")
            ds.masks[sid] = m.astype(np.int64)
        return ds

    def batch(self, ids: list[str]) -> tuple[np.ndarray, np.ndarray | None]:
        x = np.stack([self.images[i] for i in ids]) if ids else None
        if ids and all(i in self.masks for i in ids):
            return x, np.stack([self.masks[i] for i in ids])
        return x, None
