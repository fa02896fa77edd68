import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridnas.autodiff import Tensor
from hybridnas.autodiff import functional as F
from hybridnas.errors import ConfigurationError, TrainingError, ValidationError
from hybridnas.semisup import (TeacherStudentPair, consistency_loss, ema_update, mean_teacher_losses,
                               rampup_weight, supervised_loss, total_loss)


@pytest.fixture
def pair(rng):
    student = {"w": Tensor(rng.standard_normal((3, 2)), requires_grad=True),
               "alpha.s4": Tensor(rng.standard_normal(4), requires_grad=True)}
    return TeacherStudentPair.from_student(student, mu=0.5)


class TestEMA:
    def test_mu_zero_copies(self, pair):
        pair.student["w"].assign(pair.student["w"].data + 1.0)
        ema_update(pair, mu=0.0)
        for k in pair.student:
            np.testing.assert_array_equal(pair.teacher[k].data, pair.student[k].data)

    def test_one_step_arithmetic(self):
        p = TeacherStudentPair({"a": Tensor([1.0])}, {"a": Tensor([0.0])}, mu=0.99)
        ema_update(p)
        assert p.teacher["a"].data[0] == pytest.approx(0.01, abs=1e-15)

    def test_converges_geometrically(self):
        p = TeacherStudentPair({"a": Tensor([2.0])}, {"a": Tensor([0.0])}, mu=0.9)
        gaps = []
        for _ in range(50):
            ema_update(p)
            gaps.append(abs(p.teacher["a"].data[0] - 2.0))
        assert all(b < a for a, b in zip(gaps, gaps[1:]))
        np.testing.assert_allclose(np.array(gaps[1:]) / np.array(gaps[:-1]), 0.9, rtol=1e-9)

    @pytest.mark.parametrize("mu", [-0.1, 1.0, 1.5])
    def test_range(self, pair, mu):
        with pytest.raises(ConfigurationError):
            ema_update(pair, mu=mu)

    def test_subset_of_names(self, pair):
        before = pair.teacher["alpha.s4"].data.copy()
        pair.student["w"].assign(np.zeros((3, 2)))
        pair.student["alpha.s4"].assign(np.zeros(4))
        ema_update(pair, names=["w"])
        np.testing.assert_array_equal(pair.teacher["alpha.s4"].data, before)
        assert not np.array_equal(pair.teacher["w"].data, before)

    def test_snapshot_mode_blends_previous_student(self):
        p = TeacherStudentPair({"a": Tensor([1.0])}, {"a": Tensor([5.0])}, mu=0.75, mode="snapshot")
        p.snapshot()
        p.student["a"].assign([3.0])
        ema_update(p)
        assert p.teacher["a"].data[0] == pytest.approx(0.75 * 1.0 + 0.25 * 3.0)

    def test_teacher_never_gets_grads(self, pair, rng):
        loss = (F.matmul(Tensor(rng.standard_normal((1, 3))), pair.teacher["w"])).sum() \
            + (pair.student["w"] * 1.0).sum()
        loss.backward()
        assert pair.teacher["w"].grad is None and not pair.teacher["w"].requires_grad

    def test_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            TeacherStudentPair({"a": Tensor([1.0])}, {"a": Tensor([1.0, 2.0])})


class TestConsistency:
    def test_identical_logits(self, rng):
        l, u = rng.standard_normal((2, 4, 3, 3)), rng.standard_normal((3, 4, 3, 3))
        assert consistency_loss(l, Tensor(l), u, Tensor(u), 2, 3).item() == 0.0

    def test_closed_form_two_classes(self):
        t = np.zeros((1, 2, 1, 1))
        s = np.array([1e6, 0.0]).reshape(1, 2, 1, 1)
        assert consistency_loss(t, Tensor(s), None, None, 1, 0).item() == pytest.approx(0.25)

    def test_empty_unlabeled_reduces_to_labeled(self, rng):
        t, s = rng.standard_normal((2, 4, 3, 3)), Tensor(rng.standard_normal((2, 4, 3, 3)))
        ref = F.mse(F.softmax(s, axis=1), F.softmax(Tensor(t), axis=1)).item()
        assert consistency_loss(t, s, None, None, 2, 0).item() == pytest.approx(ref)

    def test_each_term_averaged_by_own_batch(self, rng):
        tl, sl = rng.standard_normal((1, 3, 2, 2)), rng.standard_normal((1, 3, 2, 2))
        tu, su = rng.standard_normal((4, 3, 2, 2)), rng.standard_normal((4, 3, 2, 2))

        def per_sample(t, s):
            pt = np.exp(t) / np.exp(t).sum(1, keepdims=True)
            ps = np.exp(s) / np.exp(s).sum(1, keepdims=True)
            return ((pt - ps) ** 2).mean(axis=(1, 2, 3))

        ref = per_sample(tl, sl).sum() / 1 + per_sample(tu, su).sum() / 4
        got = consistency_loss(tl, Tensor(sl), tu, Tensor(su), 1, 4).item()
        assert got == pytest.approx(ref, rel=1e-12)

    def test_both_empty(self):
        with pytest.raises(ValidationError):
            consistency_loss(None, None, None, None, 0, 0)

    def test_no_gradient_into_teacher(self, rng):
        t = Tensor(rng.standard_normal((1, 3, 2, 2)), requires_grad=True)
        s = Tensor(rng.standard_normal((1, 3, 2, 2)), requires_grad=True)
        consistency_loss(t, s, None, None, 1, 0).backward()
        assert t.grad is None and np.abs(s.grad).max() > 0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_shift_invariance(self, seed):
        r = np.random.default_rng(seed)
        t, s = r.standard_normal((2, 4, 3, 3)), r.standard_normal((2, 4, 3, 3))
        shift = r.standard_normal((2, 1, 3, 3)) * 10
        a = consistency_loss(t, Tensor(s), None, None, 2, 0).item()
        b = consistency_loss(t + shift, Tensor(s - shift), None, None, 2, 0).item()
        assert a == pytest.approx(b, abs=1e-12)


class TestSupervised:
    def test_saturated(self):
        logits = np.full((1, 2, 2, 2), -1e6)
        labels = np.array([[[0, 1], [1, 0]]])
        for i in range(2):
            for j in range(2):
                logits[0, labels[0, i, j], i, j] = 1e6
        assert supervised_loss(Tensor(logits), labels, 1).item() == pytest.approx(0.0, abs=1e-9)

    def test_uniform(self):
        assert supervised_loss(Tensor(np.zeros((2, 4, 2, 2))), np.zeros((2, 2, 2), int), 2).item() == pytest.approx(math.log(4))

    def test_hand_built_2x2(self):
        logits = np.array([[[[1.0, 0.0], [2.0, -1.0]], [[0.0, 3.0], [0.5, 0.0]]]])
        labels = np.array([[[0, 1], [1, 0]]])
        ref = 0.0
        for i in range(2):
            for j in range(2):
                z = logits[0, :, i, j]
                ref += -(z[labels[0, i, j]] - math.log(math.exp(z[0]) + math.exp(z[1])))
        assert supervised_loss(Tensor(logits), labels, 1).item() == pytest.approx(ref / 4, rel=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(ValidationError):
            supervised_loss(Tensor(np.zeros((1, 2, 2, 2))), np.full((1, 2, 2), 2), 1)


class TestRamp:
    def test_endpoints(self):
        assert rampup_weight(0, 10) == pytest.approx(math.exp(-5), abs=1e-12)
        assert rampup_weight(10, 10, 2.5) == 2.5
        assert rampup_weight(25, 10, 2.5) == 2.5

    def test_monotone_and_bounded(self):
        vals = [rampup_weight(e, 7, 1.3) for e in np.linspace(0, 7, 100)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))
        assert all(0 < v <= 1.3 for v in vals)

    def test_invalid_length(self):
        with pytest.raises(ConfigurationError):
            rampup_weight(0, 0)


class TestTotal:
    def test_zero_weight(self):
        b = total_loss(Tensor(0.5), Tensor(0.2), 0.0)
        assert b.L_total.item() == 0.5

    def test_arithmetic(self):
        assert total_loss(Tensor(0.5), Tensor(0.2), 1.0).L_total.item() == pytest.approx(0.7)

    def test_non_finite_names_component(self):
        with pytest.raises(TrainingError, match="L_c"):
            total_loss(Tensor(0.5), Tensor(float("nan")), 1.0)

    def test_epoch_only_changes_lambda(self, rng):
        s = Tensor(rng.standard_normal((3, 4, 2, 2)))
        t = rng.standard_normal((3, 4, 2, 2))
        labels = rng.integers(0, 4, (1, 2, 2))
        a = mean_teacher_losses(s, t, labels, 1, 2, rampup_weight(0, 5))
        b = mean_teacher_losses(s, t, labels, 1, 2, rampup_weight(5, 5))
        assert a.L_s.item() == b.L_s.item() and a.L_c.item() == b.L_c.item()
        assert b.L_total.item() - a.L_total.item() == pytest.approx((1 - math.exp(-5)) * a.L_c.item())

    def test_teacher_supervision_has_no_gradient(self, rng):
        s = Tensor(rng.standard_normal((1, 4, 2, 2)), requires_grad=True)
        t = rng.standard_normal((1, 4, 2, 2))
        labels = rng.integers(0, 4, (1, 2, 2))
        b = mean_teacher_losses(s, t, labels, 1, 0, 0.0, supervised_on="teacher")
        b.L_total.backward()
        np.testing.assert_array_equal(s.grad, 0.0)
