"""Disjoint labeled/unlabeled A/B splits plus a validation hold-out."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..data import DatasetManifest
from ..errors import ConfigurationError, ValidationError


@dataclass
class SplitPlan:
    labeled_a: list[str]
    labeled_b: list[str]
    unlabeled_a: list[str]
    unlabeled_b: list[str]
    val: list[str]
    seed: int

    def to_dict(self) -> dict:
        return {"l_A": self.labeled_a, "l_B": self.labeled_b, "u_A": self.unlabeled_a,
                "u_B": self.unlabeled_b, "val": self.val, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        return cls(list(d["l_A"]), list(d["l_B"]), list(d["u_A"]), list(d["u_B"]),
                   list(d["val"]), int(d["seed"]))

    @property
    def labeled_train(self) -> list[str]:
        return self.labeled_a + self.labeled_b

    def check_disjoint(self) -> None:
        seen: dict[str, str] = {}
        for name, ids in self.to_dict().items():
            if name == "seed":
                continue
            for i in ids:
                if i in seen:
                    raise ValidationError(f"sample {i} appears in both {seen[i]} and {name}")
                seen[i] = name


def make_splits(manifest: DatasetManifest, seed: int, val_fraction: float = 0.1) -> SplitPlan:
    """Shuffle by seed; ceil(10%) (min 1) labeled to validation; halve the rest into A/B."""
    labeled = list(manifest.labeled)
    if not labeled:
        raise ConfigurationError("dataset has no labeled samples")
    if len(labeled) < 2:
        raise ConfigurationError("need at least 2 labeled samples (one is held out for validation)")
    rng = np.random.default_rng(seed)
    lab = [labeled[i] for i in rng.permutation(len(labeled))]
    unl = [manifest.unlabeled[i] for i in rng.permutation(len(manifest.unlabeled))]
    n_val = max(1, math.ceil(val_fraction * len(lab) - 1e-9))
    val, rest = lab[:n_val], lab[n_val:]
    la, lb = rest[:(len(rest) + 1) // 2], rest[(len(rest) + 1) // 2:]
    ua, ub = unl[:(len(unl) + 1) // 2], unl[(len(unl) + 1) // 2:]
    plan = SplitPlan(la, lb, ua, ub, val, seed)
    plan.check_disjoint()
    return plan
