import json
import math

import numpy as np
import pytest

from hybridnas.autodiff import Tensor
from hybridnas.config import SupernetConfig
from hybridnas.data import DatasetManifest, InMemoryDataset, gen_toy_dataset
from hybridnas.errors import ConfigurationError, TrainingError, ValidationError
from hybridnas.trainer import (SGD, Adam, RunConfig, SearchRun, SplitPlan, cosine_lr, kfold_evaluate,
                               load_checkpoint, load_config, make_splits, param_hash, run_search)


def small_cfg(**kw):
    base = dict(layers=2, filter_multiplier=4, blocks=2, resolutions=(4, 8), input_size=(32, 32),
                patch_size=8, embed_dim=8, heads=2, depth=1, mlp_ratio=2)
    base.update(kw)
    return SupernetConfig(**base)


def small_run(tmp_path, **kw):
    base = dict(epochs=3, arch_warmup_epochs=1, seed=0, out_dir=str(tmp_path / "run"),
                batch_labeled=1, batch_unlabeled=1)
    base.update(kw)
    return RunConfig(**base)


def fake_manifest(n_lab, n_unl):
    return DatasetManifest(None, 32, 4, [f"L{i}" for i in range(n_lab)], [f"U{i}" for i in range(n_unl)], 0)


def scalar(value, grad):
    t = Tensor(np.array([value]), requires_grad=True)
    t.grad = np.array([grad], dtype=float)
    return t


class TestOptimizers:
    def test_sgd_fixed_point(self):
        p = scalar(1.5, 0.0)
        SGD(0.01, 0.9, 0.0).step({"p": p})
        assert p.data[0] == 1.5

    def test_sgd_one_step(self):
        p = scalar(1.0, 1.0)
        SGD(0.01, 0.9, 0.0).step({"p": p})
        assert p.data[0] == pytest.approx(0.99, abs=1e-15)

    def test_sgd_momentum_and_decay(self):
        p = scalar(2.0, 1.0)
        opt = SGD(0.1, 0.9, 0.5)
        opt.step({"p": p})  # v = 1 + 1 = 2 -> p = 1.8
        p.grad = np.array([1.0])
        opt.step({"p": p})  # v = 1.8 + 1 + 0.9 = 3.7 -> p = 1.43
        assert p.data[0] == pytest.approx(1.43, abs=1e-12)

    @pytest.mark.parametrize("g", [1.0, 1e-3, 1e3])
    def test_adam_first_step_is_lr(self, g):
        p = scalar(0.0, g)
        Adam(0.003, weight_decay=0.0).step({"p": p})
        assert p.data[0] == pytest.approx(-0.003, rel=1e-4)

    def test_adam_weight_decay_in_gradient(self):
        p = scalar(2.0, 0.0)
        Adam(0.003, weight_decay=1e-3).step({"p": p})
        assert p.data[0] == pytest.approx(2.0 - 0.003, rel=1e-6)

    def test_missing_gradient_names_param(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        with pytest.raises(TrainingError, match="enc.stem.c1"):
            SGD().step({"enc.stem.c1": p})

    def test_weight_decay_shrinks_solution(self):
        def solve(wd):
            p = Tensor(np.array([3.0, -2.0]), requires_grad=True)
            opt = SGD(0.05, 0.9, wd)
            target = np.array([3.0, -2.0])
            for _ in range(500):
                p.grad = 2 * (p.data - target)
                opt.step({"p": p})
            return np.linalg.norm(p.data)

        assert solve(0.5) < solve(0.0) - 0.5

    def test_cosine_endpoints(self):
        assert cosine_lr(0, 40, 0.01, 0.001) == pytest.approx(0.01, rel=1e-14)
        assert cosine_lr(40, 40, 0.01, 0.001) == pytest.approx(0.001)
        assert cosine_lr(20, 40, 0.01, 0.001) == pytest.approx(0.0055)


class TestSplits:
    def test_twenty_forty_counts(self):
        s = make_splits(fake_manifest(20, 40), 0)
        assert (len(s.val), len(s.labeled_a), len(s.labeled_b), len(s.unlabeled_a), len(s.unlabeled_b)) == (2, 9, 9, 20, 20)

    def test_desk_counts(self):
        s = make_splits(fake_manifest(8, 16), 0)
        assert (len(s.val), len(s.labeled_a), len(s.labeled_b), len(s.unlabeled_a), len(s.unlabeled_b)) == (1, 4, 3, 8, 8)

    def test_no_unlabeled(self):
        s = make_splits(fake_manifest(10, 0), 0)
        assert s.unlabeled_a == [] and s.unlabeled_b == []

    def test_deterministic(self):
        assert make_splits(fake_manifest(12, 9), 5) == make_splits(fake_manifest(12, 9), 5)
        assert make_splits(fake_manifest(12, 9), 5) != make_splits(fake_manifest(12, 9), 6)

    def test_partition(self):
        m = fake_manifest(13, 7)
        s = make_splits(m, 1)
        assert sorted(s.val + s.labeled_train) == sorted(m.labeled)
        assert sorted(s.unlabeled_a + s.unlabeled_b) == sorted(m.unlabeled)
        s.check_disjoint()

    @pytest.mark.parametrize("n", [0, 1])
    def test_too_few_labeled(self, n):
        with pytest.raises(ConfigurationError):
            make_splits(fake_manifest(n, 3), 0)

    def test_overlap_detected(self):
        with pytest.raises(ValidationError, match="L1"):
            SplitPlan(["L1"], ["L1"], [], [], ["L0"], 0).check_disjoint()

    def test_round_trip(self):
        s = make_splits(fake_manifest(9, 4), 2)
        assert SplitPlan.from_dict(json.loads(json.dumps(s.to_dict()))) == s


class TestRunConfig:
    def test_defaults(self):
        r = RunConfig()
        assert (r.epochs, r.arch_warmup_epochs, r.w_lr, r.w_momentum, r.w_weight_decay,
                r.alpha_lr, r.alpha_weight_decay) == (40, 10, 0.01, 0.9, 3e-4, 0.003, 1e-3)
        assert r.ramp_epochs == 10

    def test_warmup_below_epochs(self):
        with pytest.raises(ConfigurationError):
            RunConfig(epochs=5, arch_warmup_epochs=5)

    def test_round_trip(self):
        r = RunConfig(grad_clip=5.0, lr_schedule="constant")
        assert RunConfig.from_dict(json.loads(json.dumps(r.to_dict()))) == r

    def test_unknown_key(self):
        with pytest.raises(ConfigurationError):
            RunConfig.from_dict({"epoch": 3})

    def test_load_config(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"supernet": {"layers": 1}, "run": {"epochs": 2, "arch_warmup_epochs": 1}}))
        cfg, run = load_config(p)
        assert cfg.layers == 1 and run.epochs == 2

    def test_load_config_bad_json(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{")
        with pytest.raises(ValidationError):
            load_config(p)


class TestSearchRun:
    def test_warmup_gating(self, small_dataset, tmp_path):
        s = SearchRun(small_cfg(), small_run(tmp_path, epochs=4, arch_warmup_epochs=2), small_dataset)
        h0 = s.arch_hash()
        t0 = param_hash(s.teacher, s.arch_names())
        for _ in range(2):
            rec = s.epoch_step()
            assert rec["arch_updates"] == 0 and rec["arch_hash"] == h0
        assert param_hash(s.teacher, s.arch_names()) == t0
        rec = s.epoch_step()
        assert rec["arch_updates"] > 0 and rec["arch_hash"] != h0

    def test_zero_lr_is_null_update(self, small_dataset, tmp_path):
        run = small_run(tmp_path, epochs=2, arch_warmup_epochs=0, w_lr=0.0, w_lr_min=0.0, gamma_lr=0.0,
                        alpha_lr=0.0, batch_labeled=4, batch_unlabeled=4)
        s = SearchRun(small_cfg(), run, small_dataset)
        before = {k: v.data.copy() for k, v in s.student.items()}
        rec = s.epoch_step()
        for k, v in s.student.items():
            assert v.data.tobytes() == before[k].tobytes(), k
            assert s.teacher[k].data.tobytes() == before[k].tobytes(), k
        assert 0.0 <= rec["val_dice"] <= 1.0 and rec["L_total"] is not None

    def test_audit_order(self, small_dataset, tmp_path):
        s = SearchRun(small_cfg(), small_run(tmp_path, arch_warmup_epochs=0), small_dataset)
        s.epoch_step()
        by_batch = {}
        for _, b, tag in s.audit:
            by_batch.setdefault(b, []).append(tag)
        assert by_batch[0] == ["student_w", "teacher_w", "student_arch", "teacher_arch"]
        for tags in by_batch.values():
            if "teacher_w" in tags and "student_arch" in tags:
                assert tags.index("student_w") < tags.index("teacher_w") < tags.index("student_arch")

    def test_epoch_alternation(self, small_dataset, tmp_path):
        s = SearchRun(small_cfg(), small_run(tmp_path, arch_warmup_epochs=0, alternation="epoch"), small_dataset)
        s.epoch_step()
        tags = [t for _, _, t in s.audit]
        last_w = max(i for i, t in enumerate(tags) if t == "teacher_w")
        first_a = min(i for i, t in enumerate(tags) if t == "student_arch")
        assert last_w < first_a

    def test_epoch_ema_schedule(self, small_dataset, tmp_path):
        s = SearchRun(small_cfg(), small_run(tmp_path, arch_warmup_epochs=0, ema_schedule="epoch"), small_dataset)
        s.epoch_step()
        tags = [t for _, _, t in s.audit]
        assert tags.count("teacher_w") == 1 and tags.count("teacher_arch") == 1
        assert tags[-2:] == ["teacher_w", "teacher_arch"]

    def test_arch_optimizers_touch_only_their_groups(self, small_dataset, tmp_path):
        s = SearchRun(small_cfg(), small_run(tmp_path, arch_warmup_epochs=0), small_dataset)
        s.epoch_step()
        assert set(s.adam.m) == set(s.groups["alpha"])
        assert set(s.sgd_gamma.buffers) == set(s.groups["gamma"])
        assert set(s.sgd_w.buffers) == set(s.groups["w"])

    def test_mu_zero_teacher_tracks_student(self, small_dataset, tmp_path):
        s = SearchRun(small_cfg(), small_run(tmp_path, arch_warmup_epochs=0, ema_decay=0.0), small_dataset)
        for _ in range(2):
            rec = s.epoch_step()
            assert rec["L_c"] == 0.0 and rec["arch_L_c"] == 0.0

    def test_no_unlabeled(self, tmp_path):
        m = gen_toy_dataset(1, 6, 0, 32, tmp_path / "d")
        s = SearchRun(small_cfg(), small_run(tmp_path, arch_warmup_epochs=0), InMemoryDataset.load(m))
        rec = s.epoch_step()
        assert rec["arch_updates"] > 0 and math.isfinite(rec["L_total"])

    def test_class_mismatch(self, small_dataset, tmp_path):
        with pytest.raises(ValidationError, match="classes"):
            SearchRun(small_cfg(num_classes=3), small_run(tmp_path), small_dataset)

    def test_evaluate_rejects_empty_and_unlabeled(self, small_dataset, tmp_path):
        s = SearchRun(small_cfg(), small_run(tmp_path), small_dataset)
        with pytest.raises(ValidationError):
            s.evaluate([])
        with pytest.raises(ValidationError):
            s.evaluate(small_dataset.manifest.unlabeled[:1])

    def test_non_finite_loss_dumps_state(self, small_dataset, tmp_path):
        s = SearchRun(small_cfg(), small_run(tmp_path), small_dataset)
        k = s.groups["w"][0]
        s.student[k].assign(np.full(s.student[k].shape, np.nan))
        with pytest.raises(TrainingError):
            s.epoch_step()
        info = json.loads((tmp_path / "run" / "failure.json").read_text())
        assert info["epoch"] == 0 and info["labeled_ids"]
        assert (tmp_path / "run" / "failure" / "state.json").exists()


class TestRunSearch:
    def test_outputs_and_determinism(self, small_dataset, tmp_path):
        a = run_search(small_cfg(), small_run(tmp_path / "a"), dataset=small_dataset)
        b = run_search(small_cfg(), small_run(tmp_path / "b"), dataset=small_dataset)
        for name in ("metrics.jsonl", "genotype.json"):
            assert (a.out_dir / name).read_bytes() == (b.out_dir / name).read_bytes()
        for f in sorted((a.out_dir / "last").rglob("*")):
            if f.is_file():
                rel = f.relative_to(a.out_dir)
                if rel.name != "config.json":  # holds the out_dir
                    assert f.read_bytes() == (b.out_dir / rel).read_bytes(), rel
        lines = (a.out_dir / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 3 and {"epoch", "L_s", "L_c", "lambda1", "L_total"} <= set(json.loads(lines[0]))
        geno = json.loads((a.out_dir / "genotype.json").read_text())
        assert set(geno["genotypes"]) == {"alpha.s4", "alpha.s8"}
        assert (a.out_dir / "best" / "state.json").exists()

    def test_resume_matches_uninterrupted(self, small_dataset, tmp_path):
        full = run_search(small_cfg(), small_run(tmp_path / "full"), dataset=small_dataset)

        def crash(rec):
            if rec["epoch"] == 1:
                raise KeyboardInterrupt

        with pytest.raises(KeyboardInterrupt):
            run_search(small_cfg(), small_run(tmp_path / "part"), dataset=small_dataset, progress=crash)
        part = run_search(small_cfg(), small_run(tmp_path / "part"), resume=True, dataset=small_dataset)
        assert full.history == part.history
        for k, v in full.run.student.items():
            assert v.data.tobytes() == part.run.student[k].data.tobytes()
        assert ((tmp_path / "full" / "run" / "metrics.jsonl").read_bytes()
                == (tmp_path / "part" / "run" / "metrics.jsonl").read_bytes())

    def test_resume_at_end_is_noop(self, small_dataset, tmp_path):
        run = small_run(tmp_path, epochs=2)
        run_search(small_cfg(), run, dataset=small_dataset)
        before = {f: f.read_bytes() for f in (tmp_path / "run" / "last").rglob("*.tns")}
        metrics = (tmp_path / "run" / "metrics.jsonl").read_bytes()
        res = run_search(small_cfg(), run, resume=True, dataset=small_dataset)
        assert res.run.epoch == 2
        assert {f: f.read_bytes() for f in (tmp_path / "run" / "last").rglob("*.tns")} == before
        assert (tmp_path / "run" / "metrics.jsonl").read_bytes() == metrics

    def test_checkpoint_round_trip(self, small_dataset, tmp_path):
        s = SearchRun(small_cfg(), small_run(tmp_path, arch_warmup_epochs=0), small_dataset)
        s.epoch_step()
        s.save(tmp_path / "ck")
        ck = load_checkpoint(tmp_path / "ck")
        orig = s.to_checkpoint()
        assert set(ck.tensors) == set(orig.tensors)
        for k, v in orig.tensors.items():
            assert ck.tensors[k].dtype == v.dtype and ck.tensors[k].tobytes() == v.tobytes()
        assert ck.state == json.loads(json.dumps(orig.state))
        back = SearchRun.from_checkpoint(tmp_path / "ck", small_dataset)
        assert back.adam.t == s.adam.t and back.epoch == 1
        for k in s.student:
            assert back.teacher[k].data.tobytes() == s.teacher[k].data.tobytes()

    def test_layout(self, small_dataset, tmp_path):
        s = SearchRun(small_cfg(), small_run(tmp_path, arch_warmup_epochs=0), small_dataset)
        s.epoch_step()
        s.save(tmp_path / "ck")
        names = {p.name for p in (tmp_path / "ck").iterdir()}
        assert names == {"config.json", "splits.json", "genotype.json", "state.json", "params", "optim"}
        assert (tmp_path / "ck" / "params" / "student.alpha.s4.tns").exists()

    def test_load_not_a_checkpoint(self, tmp_path):
        with pytest.raises(ValidationError):
            load_checkpoint(tmp_path)

    def test_kfold(self, small_dataset, tmp_path):
        paths = []
        for seed in (0, 1):
            s = SearchRun(small_cfg(), small_run(tmp_path, seed=seed), small_dataset)
            s.epoch_step()
            paths.append(s.save(tmp_path / f"fold{seed}"))
        res = kfold_evaluate(paths, small_dataset.manifest)
        assert len(res["dice"]) == 2 and res["dice_mean"] == pytest.approx(np.mean(res["dice"]))
