"""Mean Teacher: EMA teacher, consistency and supervised losses, ramp-up."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .autodiff import Tensor
from .autodiff import functional as F
from .errors import ConfigurationError, TrainingError, ValidationError


@dataclass
class TeacherStudentPair:
    """Student parameters (trainable) and their EMA teacher (never receives gradients)."""

    student: dict
    teacher: dict
    mu: float = 0.99
    mode: str = "standard"  # or "snapshot": blend of two consecutive student snapshots
    _prev_student: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if set(self.student) != set(self.teacher):
            raise ConfigurationError("teacher and student must hold the same parameter names")
        for k, s in self.student.items():
            if s.shape != self.teacher[k].shape:
                raise ConfigurationError(f"teacher/student shape mismatch for {k}")
            self.teacher[k].requires_grad = False
        if self.mode not in ("standard", "snapshot"):
            raise ConfigurationError(f"unknown EMA mode {self.mode!r}")

    @classmethod
    def from_student(cls, student: dict, mu: float = 0.99, mode: str = "standard") -> "TeacherStudentPair":
        teacher = {k: Tensor(v.data, requires_grad=False, name=k) for k, v in student.items()}
        return cls(student, teacher, mu, mode)

    def snapshot(self, names: Iterable[str] | None = None) -> None:
        """Remember the student values before an update (used by the ``snapshot`` mode)."""
        for k in (self.student if names is None else names):
            self._prev_student[k] = self.student[k].data


def ema_update(pair: TeacherStudentPair, mu: float | None = None,
               names: Iterable[str] | None = None) -> None:
    """Move the teacher towards the student for ``names`` (all parameters by default).

    standard: ``t <- mu * t + (1 - mu) * s``
    snapshot: ``t <- mu * s_prev + (1 - mu) * s`` where ``s_prev`` is the last
    :meth:`TeacherStudentPair.snapshot` of the student.
    """
    mu = pair.mu if mu is None else mu
    if not 0.0 <= mu < 1.0:
        raise ConfigurationError(f"EMA decay must lie in [0, 1), got {mu}")
    for k in (pair.student if names is None else names):
        s = pair.student[k].data
        base = pair._prev_student.get(k, s) if pair.mode == "snapshot" else pair.teacher[k].data
        # increment form: exact when base == s, exact copy when mu == 0
        new = s if mu == 0.0 else base + (1.0 - mu) * (s - base)
        pair.teacher[k].assign(new)


def _channel_softmax(logits) -> Tensor:
    t = logits if isinstance(logits, Tensor) else Tensor(logits)
    return F.softmax(t, axis=1)


def consistency_loss(teacher_l, student_l, teacher_u, student_u, m: int, n_u: int) -> Tensor:
    """Channel-softmax MSE between teacher and student, each term averaged by its batch size.

    Teacher logits are treated as constants. Either term may be ``None`` with a
    zero batch size.
    """
    if m <= 0 and n_u <= 0:
        raise ValidationError("consistency loss needs at least one labeled or unlabeled sample")
    total = None
    for t_logits, s_logits, count in ((teacher_l, student_l, m), (teacher_u, student_u, n_u)):
        if count <= 0 or s_logits is None:
            continue
        if s_logits.shape[0] != count:
            raise ValidationError(f"batch size {count} does not match logits {s_logits.shape}")
        t_data = t_logits.data if isinstance(t_logits, Tensor) else np.asarray(t_logits)
        target = _channel_softmax(Tensor(t_data))
        pred = _channel_softmax(s_logits)
        # sum of per-sample MSE over the batch, then / count == mean over all elements
        term = F.mse(pred, target)
        total = term if total is None else total + term
    if total is None:
        raise ValidationError("consistency loss received no logits")
    return total


def supervised_loss(logits_l: Tensor, labels: np.ndarray, m: int) -> Tensor:
    """Mean pixel cross-entropy over the labeled batch of size ``m``."""
    if logits_l.shape[0] != m:
        raise ValidationError(f"batch size {m} does not match logits {logits_l.shape}")
    return F.cross_entropy(logits_l, labels)


def rampup_weight(epoch: float, ramp_len: int, lambda_max: float = 1.0) -> float:
    """Exponential ramp-up ``lambda_max * exp(-5 (1 - t)^2)`` with ``t = min(epoch, ramp_len) / ramp_len``."""
    if ramp_len < 1:
        raise ConfigurationError("ramp_len must be >= 1")
    t = min(max(epoch, 0.0), ramp_len) / ramp_len
    return lambda_max * math.exp(-5.0 * (1.0 - t) ** 2)


@dataclass
class LossBundle:
    L_s: Tensor
    L_c: Tensor
    lambda0: float
    lambda1: float
    L_total: Tensor

    def as_floats(self) -> dict[str, float]:
        return {"L_s": float(self.L_s.data), "L_c": float(self.L_c.data),
                "lambda1": self.lambda1, "L_total": float(self.L_total.data)}


def total_loss(L_s: Tensor, L_c: Tensor, lambda1: float, lambda0: float = 1.0) -> LossBundle:
    for name, t in (("L_s", L_s), ("L_c", L_c)):
        if not np.isfinite(t.data).all():
            raise TrainingError(f"loss component {name} is not finite ({float(t.data)})")
    total = L_s * lambda0 + L_c * lambda1
    return LossBundle(L_s, L_c, lambda0, lambda1, total)


def mean_teacher_losses(student_logits: Tensor, teacher_logits: np.ndarray | Tensor,
                        labels: np.ndarray, m: int, n_u: int, lambda1: float,
                        supervised_on: str = "student") -> LossBundle:
    """All Mean Teacher terms for a batch whose first ``m`` rows are labeled.

    ``supervised_on="teacher"`` follows the literal formulation where the
    supervised term reads teacher predictions; it then carries no gradient.
    """
    t_data = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    s_l = F.take(student_logits, slice(0, m), axis=0) if m else None
    s_u = F.take(student_logits, slice(m, m + n_u), axis=0) if n_u else None
    L_c = consistency_loss(t_data[:m], s_l, t_data[m:m + n_u], s_u, m, n_u)
    if m == 0:
        L_s = Tensor(0.0)
    elif supervised_on == "teacher":
        L_s = supervised_loss(Tensor(t_data[:m]), labels, m)
    elif supervised_on == "student":
        L_s = supervised_loss(s_l, labels, m)
    else:
        raise ConfigurationError(f"supervised_on must be 'student' or 'teacher', got {supervised_on!r}")
    return total_loss(L_s, L_c, lambda1)
