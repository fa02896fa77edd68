"""Checkpoint directories: JSON metadata plus one TNS1 file per tensor.

Layout::

    config.json    supernet + run configuration
    splits.json    the data split plan
    genotype.json  architecture derived from the student alpha
    state.json     epoch counter, scalars, and the key -> file table
    params/*.tns   student.<name>.tns, teacher.<name>.tns
    optim/*.tns    optimizer buffers
"""

from __future__ import annotations

import json
import os
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..autodiff.serialize import load_tensor, save_tensor
from ..errors import ValidationError


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray]  # "params/student/<name>" etc.
    splits: dict
    genotype: dict
    state: dict


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _file_for(key: str) -> str:
    folder, rest = key.split("/", 1)
    return f"{folder}/{rest.replace('/', '.')}.tns"


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> Path:
    """Write into a sibling temp directory, then swap it in place."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    (tmp / "params").mkdir(parents=True)
    (tmp / "optim").mkdir()
    table = {}
    for key in sorted(ckpt.tensors):
        if key.split("/", 1)[0] not in ("params", "optim"):
            raise ValidationError(f"checkpoint tensor key {key!r} must start with params/ or optim/")
        rel = _file_for(key)
        save_tensor(tmp / rel, np.asarray(ckpt.tensors[key]))
        table[key] = rel
    _dump(tmp / "config.json", ckpt.config)
    _dump(tmp / "splits.json", ckpt.splits)
    _dump(tmp / "genotype.json", ckpt.genotype)
    _dump(tmp / "state.json", {**ckpt.state, "tensors": table})
    if path.exists():
        shutil.rmtree(path)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    path = Path(path)
    if not (path / "state.json").exists():
        raise ValidationError(f"{path} is not a checkpoint directory (no state.json)")
    try:
        state = json.loads((path / "state.json").read_text())
        config = json.loads((path / "config.json").read_text())
        splits = json.loads((path / "splits.json").read_text())
        genotype = json.loads((path / "genotype.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"unreadable checkpoint {path}: {exc}") from exc
    table = state.pop("tensors", {})
    tensors = {key: load_tensor(path / rel) for key, rel in table.items()}
    return Checkpoint(config, tensors, splits, genotype, state)
