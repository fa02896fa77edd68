"""Alternating weight / architecture optimisation with a Mean Teacher."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from itertools import cycle, islice
from pathlib import Path

import numpy as np

from .. import cell as cellmod
from ..autodiff import Tensor, backward, no_grad
from ..config import SupernetConfig
from ..data import DatasetManifest, InMemoryDataset, read_manifest
from ..errors import ConfigurationError, TrainingError, ValidationError
from ..metrics import MetricReport, mean_std, report
from ..network import HybridSegNet, optimizer_group
from ..semisup import TeacherStudentPair, ema_update, mean_teacher_losses, rampup_weight
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .optim import SGD, Adam, cosine_lr
from .splits import SplitPlan, make_splits

log = logging.getLogger(__name__)


@dataclass
class RunConfig:
    epochs: int = 40
    arch_warmup_epochs: int = 10
    batch_labeled: int = 2
    batch_unlabeled: int = 2
    seed: int = 0
    manifest: str | None = None
    out_dir: str = "runs/search"
    val_fraction: float = 0.1
    # optimisers
    w_lr: float = 0.01
    w_lr_min: float = 0.001
    lr_schedule: str = "cosine"  # or "constant"
    w_momentum: float = 0.9
    w_weight_decay: float = 3e-4
    gamma_lr: float = 0.01
    gamma_momentum: float = 0.9
    gamma_weight_decay: float = 3e-4
    alpha_lr: float = 0.003
    alpha_weight_decay: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip: float | None = None  # global L2 norm per optimiser group
    # mean teacher
    ema_decay: float = 0.99
    ema_mode: str = "standard"  # or "snapshot"
    ema_schedule: str = "batch"  # or "epoch"
    supervised_on: str = "student"
    lambda_max: float = 1.0
    ramp_len: int | None = None  # None -> arch_warmup_epochs
    # loop shape
    alternation: str = "batch"  # or "epoch"
    eval_with: str = "teacher"  # or "student"
    retain_per_block: int = 2

    def __post_init__(self):
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if not 0 <= self.arch_warmup_epochs < self.epochs:
            raise ConfigurationError(
                f"arch_warmup_epochs ({self.arch_warmup_epochs}) must be in [0, epochs={self.epochs})")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigurationError("grad_clip must be positive when set")
        if self.batch_labeled < 1 or self.batch_unlabeled < 1:
            raise ConfigurationError("batch sizes must be >= 1")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigurationError(f"ema_decay must lie in [0, 1), got {self.ema_decay}")
        for name, value, allowed in (("lr_schedule", self.lr_schedule, ("cosine", "constant")),
                                     ("ema_mode", self.ema_mode, ("standard", "snapshot")),
                                     ("ema_schedule", self.ema_schedule, ("batch", "epoch")),
                                     ("supervised_on", self.supervised_on, ("student", "teacher")),
                                     ("alternation", self.alternation, ("batch", "epoch")),
                                     ("eval_with", self.eval_with, ("teacher", "student"))):
            if value not in allowed:
                raise ConfigurationError(f"{name} must be one of {allowed}, got {value!r}")

    @property
    def ramp_epochs(self) -> int:
        return max(1, self.arch_warmup_epochs if self.ramp_len is None else self.ramp_len)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown run config keys: {sorted(unknown)}")
        return cls(**d)


def desk_run_config(**overrides) -> RunConfig:
    """Run settings for the small CPU task (64x64, two layers, a handful of images).

    Batches of one double the number of updates per epoch on the tiny splits,
    the weight learning rate is raised to match, gradients are clipped, and
    the fusion kernels take small plain SGD steps. With the default optimiser
    settings this network oscillates once architecture updates begin.
    """
    base = dict(epochs=60, arch_warmup_epochs=15, batch_labeled=1, batch_unlabeled=1,
                w_lr=0.03, w_lr_min=0.003, grad_clip=5.0, gamma_lr=0.001, gamma_momentum=0.0)
    base.update(overrides)
    return RunConfig(**base)


def load_config(path: str | os.PathLike) -> tuple[SupernetConfig, RunConfig]:
    """JSON file ``{"supernet": {...}, "run": {...}}``; missing sections take defaults."""
    try:
        d = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ValidationError(f"config not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {path} is not valid JSON: {exc}") from exc
    unknown = set(d) - {"supernet", "run"}
    if unknown:
        raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
    return SupernetConfig.from_dict(d.get("supernet", {})), RunConfig.from_dict(d.get("run", {}))


def param_hash(params: dict, names) -> str:
    h = hashlib.sha256()
    for k in sorted(names):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k].data).tobytes())
    return h.hexdigest()[:16]


# -- evaluation ---------------------------------------------------------------------------

def predict(net: HybridSegNet, params: dict, x: np.ndarray, batch_size: int = 4) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(x), batch_size):
            logits = net(params, Tensor(x[i:i + batch_size]))
            out.append(np.argmax(logits.data, axis=1))
    return np.concatenate(out)


def evaluate(net: HybridSegNet, params: dict, dataset: InMemoryDataset, ids: list[str],
             batch_size: int = 4) -> MetricReport:
    """Argmax predictions over ``ids`` scored with pooled per-class Dice/IoU."""
    if not ids:
        raise ValidationError("cannot evaluate an empty split")
    x, y = dataset.batch(list(ids))
    if y is None:
        raise ValidationError("evaluation split contains unlabeled samples")
    return report(predict(net, params, x, batch_size), y, net.cfg.num_classes)


def kfold_evaluate(checkpoints: list[str | os.PathLike], manifest: DatasetManifest,
                   split: str = "val") -> dict:
    """Evaluate each fold checkpoint on its own split; mean and std of foreground scores."""
    dataset = InMemoryDataset.load(manifest)
    dices, ious = [], []
    for path in checkpoints:
        run = SearchRun.from_checkpoint(path, dataset)
        rep = run.evaluate(run.split_ids(split))
        dices.append(rep.foreground_dice)
        ious.append(rep.foreground_iou)
    (dm, ds), (im, is_) = mean_std(dices), mean_std(ious)
    return {"dice_mean": dm, "dice_std": ds, "iou_mean": im, "iou_std": is_,
            "dice": dices, "iou": ious}


# -- the search loop ----------------------------------------------------------------------

def _chunks(ids: list[str], size: int, rng: np.random.Generator) -> list[list[str]]:
    order = [ids[i] for i in rng.permutation(len(ids))]
    return [order[i:i + size] for i in range(0, len(order), size)]


def _pair_batches(lab: list[list[str]], unl: list[list[str]]) -> list[tuple[list[str], list[str]]]:
    """One labeled with one unlabeled batch; the shorter list is cycled."""
    n = max(len(lab), len(unl))
    la = list(islice(cycle(lab), n)) if lab else [[]] * n
    ua = list(islice(cycle(unl), n)) if unl else [[]] * n
    return list(zip(la, ua))


@dataclass
class SearchRun:
    """All mutable state of one search: parameters, optimisers, counters."""

    cfg: SupernetConfig
    run: RunConfig
    dataset: InMemoryDataset
    splits: SplitPlan | None = None
    audit: list[tuple[int, int, str]] = field(default_factory=list)

    def __post_init__(self):
        m = self.dataset.manifest
        if m.classes != self.cfg.num_classes:
            raise ValidationError(
                f"manifest has {m.classes} classes but the network predicts {self.cfg.num_classes}")
        if (m.size, m.size) != tuple(self.cfg.input_size):
            raise ValidationError(f"manifest image size {m.size} != network input {self.cfg.input_size}")
        self.net = HybridSegNet(self.cfg)
        student = self.net.init_params(self.run.seed)
        self.pair = TeacherStudentPair.from_student(student, self.run.ema_decay, self.run.ema_mode)
        if self.splits is None:
            self.splits = make_splits(m, self.run.seed, self.run.val_fraction)
        self.splits.check_disjoint()
        groups: dict[str, list[str]] = {"w": [], "alpha": [], "gamma": []}
        for name in self.net.param_names():
            groups[optimizer_group(name)].append(name)
        self.groups = groups
        r = self.run
        self.sgd_w = SGD(r.w_lr, r.w_momentum, r.w_weight_decay)
        self.sgd_gamma = SGD(r.gamma_lr, r.gamma_momentum, r.gamma_weight_decay)
        self.adam = Adam(r.alpha_lr, r.adam_betas, r.adam_eps, r.alpha_weight_decay)
        self.epoch = 0
        self.best_val_dice = -1.0
        self.history: list[dict] = []

    # -- helpers
    @property
    def student(self) -> dict:
        return self.pair.student

    @property
    def teacher(self) -> dict:
        return self.pair.teacher

    def arch_names(self) -> list[str]:
        return self.groups["alpha"] + self.groups["gamma"]

    def arch_hash(self) -> str:
        return param_hash(self.student, self.arch_names())

    def lr_w(self, epoch: int) -> float:
        r = self.run
        if r.lr_schedule == "constant":
            return r.w_lr
        return cosine_lr(epoch, r.epochs, r.w_lr, r.w_lr_min)

    def split_ids(self, split: str) -> list[str]:
        s = self.splits
        table = {"val": s.val, "train": s.labeled_train, "l_A": s.labeled_a, "l_B": s.labeled_b}
        if split not in table:
            raise ValidationError(f"unknown split {split!r}; choose from {sorted(table)}")
        return table[split]

    def _losses(self, l_ids: list[str], u_ids: list[str], lam: float):
        ids = l_ids + u_ids
        x, _ = self.dataset.batch(ids)
        _, y = self.dataset.batch(l_ids) if l_ids else (None, None)
        xt = Tensor(x)
        logits_s = self.net(self.student, xt)
        with no_grad():
            logits_t = self.net(self.teacher, xt)
        return mean_teacher_losses(logits_s, logits_t, y, len(l_ids), len(u_ids), lam,
                                   self.run.supervised_on)

    def _grad_step(self, l_ids, u_ids, lam, phase: str, batch: int):
        try:
            bundle = self._losses(l_ids, u_ids, lam)
            if not np.isfinite(bundle.L_total.data).all():
                raise TrainingError(f"total loss is not finite ({float(bundle.L_total.data)})")
        except TrainingError as exc:
            self._dump_failure(phase, batch, l_ids, u_ids, str(exc))
            raise
        for p in self.student.values():
            p.zero_grad()
        backward(bundle.L_total)
        return bundle

    def _dump_failure(self, phase, batch, l_ids, u_ids, msg) -> None:
        out = Path(self.run.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        info = {"epoch": self.epoch, "batch": batch, "phase": phase, "labeled_ids": l_ids,
                "unlabeled_ids": u_ids, "error": msg}
        (out / "failure.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
        self.save(out / "failure")
        log.error("non-finite loss at epoch %d batch %d (%s); state dumped to %s",
                  self.epoch, batch, phase, out)

    def _select(self, names):
        sel = {k: self.student[k] for k in names}
        clip = self.run.grad_clip
        if clip is not None and sel:
            norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in sel.values()
                                 if p.grad is not None))
            if norm > clip:
                for p in sel.values():
                    if p.grad is not None:
                        p.grad = p.grad * (clip / norm)
        return sel

    def _ema(self, names, batch, tag) -> None:
        ema_update(self.pair, names=names)
        self.audit.append((self.epoch, batch, tag))

    # -- the four steps
    def weight_step(self, l_ids, u_ids, lam, lr, batch=0):
        names = self.groups["w"]
        if self.run.ema_mode == "snapshot":
            self.pair.snapshot(names)
        bundle = self._grad_step(l_ids, u_ids, lam, "weights", batch)
        self.sgd_w.step(self._select(names), lr)
        self.audit.append((self.epoch, batch, "student_w"))
        if self.run.ema_schedule == "batch":
            self._ema(names, batch, "teacher_w")
        return bundle

    def arch_step(self, l_ids, u_ids, lam, batch=0):
        if self.run.ema_mode == "snapshot":
            self.pair.snapshot(self.arch_names())
        bundle = self._grad_step(l_ids, u_ids, lam, "architecture", batch)
        self.adam.step(self._select(self.groups["alpha"]))
        if self.groups["gamma"]:
            self.sgd_gamma.step(self._select(self.groups["gamma"]))
        self.audit.append((self.epoch, batch, "student_arch"))
        if self.run.ema_schedule == "batch":
            self._ema(self.arch_names(), batch, "teacher_arch")
        return bundle

    def epoch_step(self) -> dict:
        """One epoch of alternating updates followed by validation; returns the log record."""
        r, s, e = self.run, self.splits, self.epoch
        self.audit = []
        rng = np.random.default_rng([r.seed, e])
        a_pairs = _pair_batches(_chunks(s.labeled_a, r.batch_labeled, rng),
                                _chunks(s.unlabeled_a, r.batch_unlabeled, rng))
        b_pairs = _pair_batches(_chunks(s.labeled_b, r.batch_labeled, rng),
                                _chunks(s.unlabeled_b, r.batch_unlabeled, rng))
        arch_on = e >= r.arch_warmup_epochs and bool(b_pairs)
        lam = rampup_weight(e, r.ramp_epochs, r.lambda_max)
        lr = self.lr_w(e)
        w_logs, a_logs = [], []
        if r.ema_mode == "snapshot" and r.ema_schedule == "epoch":
            self.pair.snapshot()

        n = max(len(a_pairs), len(b_pairs) if arch_on else 0)
        if r.alternation == "batch":
            for i in range(n):
                if i < len(a_pairs):
                    w_logs.append(self.weight_step(*a_pairs[i], lam, lr, i).as_floats())
                if arch_on and i < len(b_pairs):
                    a_logs.append(self.arch_step(*b_pairs[i], lam, i).as_floats())
        else:
            for i, (lb, ub) in enumerate(a_pairs):
                w_logs.append(self.weight_step(lb, ub, lam, lr, i).as_floats())
            if arch_on:
                for i, (lb, ub) in enumerate(b_pairs):
                    a_logs.append(self.arch_step(lb, ub, lam, i).as_floats())
        if r.ema_schedule == "epoch":
            self._ema(self.groups["w"], len(a_pairs), "teacher_w")
            if arch_on:
                self._ema(self.arch_names(), len(b_pairs), "teacher_arch")

        rep = self.evaluate(s.val)
        rec = {"epoch": e, "lr_w": lr, "lambda1": lam, "arch_updates": len(a_logs),
               "val_dice": rep.foreground_dice, "val_iou": rep.foreground_iou,
               "val_dice_per_class": rep.dice, "arch_hash": self.arch_hash()}
        for key in ("L_s", "L_c", "L_total"):
            rec[key] = float(np.mean([b[key] for b in w_logs])) if w_logs else None
            rec["arch_" + key] = float(np.mean([b[key] for b in a_logs])) if a_logs else None
        self.epoch += 1
        self.history.append(rec)
        return rec

    def evaluate(self, ids: list[str], which: str | None = None) -> MetricReport:
        which = which or self.run.eval_with
        params = self.teacher if which == "teacher" else self.student
        return evaluate(self.net, params, self.dataset, ids)

    def genotypes(self) -> dict:
        """Discrete cell per architecture-parameter tensor, from the student alpha."""
        return {"genotypes": {k: cellmod.derive_genotype(self.student[k], self.cfg.blocks,
                                                         self.run.retain_per_block).to_dict()
                              for k in sorted(self.groups["alpha"])}}

    # -- persistence
    def to_checkpoint(self) -> Checkpoint:
        t: dict[str, np.ndarray] = {}
        for k in self.net.param_names():
            t[f"params/student/{k}"] = self.student[k].data
            t[f"params/teacher/{k}"] = self.teacher[k].data
        for k, v in self.sgd_w.buffers.items():
            t[f"optim/sgd_w/{k}"] = v
        for k, v in self.sgd_gamma.buffers.items():
            t[f"optim/sgd_gamma/{k}"] = v
        for k in self.adam.m:
            t[f"optim/adam_m/{k}"] = self.adam.m[k]
            t[f"optim/adam_v/{k}"] = self.adam.v[k]
        state = {"epoch": self.epoch, "best_val_dice": self.best_val_dice, "adam_t": self.adam.t,
                 "history": self.history}
        return Checkpoint({"supernet": self.cfg.to_dict(), "run": self.run.to_dict()}, t,
                          self.splits.to_dict(), self.genotypes(), state)

    def save(self, path: str | os.PathLike) -> Path:
        return save_checkpoint(path, self.to_checkpoint())

    def restore(self, ckpt: Checkpoint) -> None:
        names = set(self.net.param_names())
        for key, arr in ckpt.tensors.items():
            folder, group, name = key.split("/", 2)
            if folder == "params":
                if name not in names:
                    raise ValidationError(f"checkpoint parameter {name} is unknown to this network")
                target = self.student if group == "student" else self.teacher
                target[name].assign(arr)
            else:
                store = {"sgd_w": self.sgd_w.buffers, "sgd_gamma": self.sgd_gamma.buffers,
                         "adam_m": self.adam.m, "adam_v": self.adam.v}[group]
                store[name] = arr
        missing = [n for n in names if f"params/student/{n}" not in ckpt.tensors]
        if missing:
            raise ValidationError(f"checkpoint lacks parameters {sorted(missing)[:3]}")
        self.splits = SplitPlan.from_dict(ckpt.splits)
        st = ckpt.state
        self.epoch, self.best_val_dice = int(st["epoch"]), float(st["best_val_dice"])
        self.adam.t = int(st["adam_t"])
        self.history = list(st.get("history", []))

    @classmethod
    def from_checkpoint(cls, path: str | os.PathLike, dataset: InMemoryDataset | None = None,
                        run_overrides: dict | None = None) -> "SearchRun":
        ckpt = load_checkpoint(path)
        cfg = SupernetConfig.from_dict(ckpt.config["supernet"])
        run = RunConfig.from_dict({**ckpt.config["run"], **(run_overrides or {})})
        if dataset is None:
            if not run.manifest:
                raise ValidationError("checkpoint config names no manifest; pass one explicitly")
            dataset = InMemoryDataset.load(read_manifest(run.manifest))
        obj = cls(cfg, run, dataset, SplitPlan.from_dict(ckpt.splits))
        obj.restore(ckpt)
        return obj


@dataclass
class SearchResult:
    out_dir: Path
    history: list[dict]
    best_val_dice: float
    genotype: dict
    run: SearchRun


def _write_jsonl(path: Path, records: list[dict]) -> None:
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def run_search(cfg: SupernetConfig, run: RunConfig, resume: bool = False,
               dataset: InMemoryDataset | None = None, progress=None) -> SearchResult:
    """Full search: epochs, per-epoch last checkpoint, best-by-val checkpoint, final genotype.

    Output directory: ``metrics.jsonl``, ``last/``, ``best/``, ``genotype.json``.
    """
    if dataset is None:
        if not run.manifest:
            raise ConfigurationError("run config needs a manifest path")
        dataset = InMemoryDataset.load(read_manifest(run.manifest))
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    last = out / "last"
    if resume and (last / "state.json").exists():
        search = SearchRun.from_checkpoint(last, dataset)
        if search.cfg != cfg or search.run.to_dict() != run.to_dict():
            log.warning("resuming with the configuration stored in %s", last)
        log.info("resumed at epoch %d", search.epoch)
    else:
        search = SearchRun(cfg, run, dataset)
    runcfg = search.run
    _write_jsonl(out / "metrics.jsonl", search.history)
    while search.epoch < runcfg.epochs:
        rec = search.epoch_step()
        if rec["val_dice"] > search.best_val_dice:
            search.best_val_dice = rec["val_dice"]
            search.save(out / "best")
        search.save(last)
        with open(out / "metrics.jsonl", "a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        if progress is not None:
            progress(rec)
        log.info("epoch %d  L_total %.4f  val dice %.4f", rec["epoch"], rec["L_total"] or math.nan,
                 rec["val_dice"])
    if not (last / "state.json").exists():
        search.save(last)
    geno = search.genotypes()
    (out / "genotype.json").write_text(json.dumps(geno, indent=2, sort_keys=True) + "\n")
    return SearchResult(out, search.history, search.best_val_dice, geno, search)
