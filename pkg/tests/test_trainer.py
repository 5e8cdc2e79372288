import csv

import numpy as np
import pytest

from distillbench.datasets import Dataset, gen_gaussian_mixture, split
from distillbench.netcore import forward
from distillbench.numkit import SeededRng
from distillbench.projectors import Projector
from distillbench.trainer import (ConfigError, DistillConfig, LogitProjectorHead, NetSpec,
                                  SingleProjectorHead, TrainingDiverged, distill, evaluate, lr_at,
                                  make_head, run_sweep, sweep_to_csv, train_teacher)


@pytest.fixture(scope="module")
def data():
    ds = gen_gaussian_mixture(4, 6, 30, 0.4, 0)
    return split(ds, 0.5, 0)


@pytest.fixture(scope="module")
def teacher(data):
    tr, te = data
    net, _ = train_teacher(NetSpec(6, (16, 12), 4), tr, te, DistillConfig(mode="none", epochs=15, seed=100))
    return net


STUDENT = NetSpec(6, (12,), 4)


def _cfg(**kw):
    base = dict(epochs=6, batch_size=16, seed=3)
    base.update(kw)
    return DistillConfig(**base)


def _params_bytes(net):
    return [p.tobytes() for p in net.params()]


class TestConfig:
    def test_lists_every_problem(self):
        with pytest.raises(ConfigError) as err:
            DistillConfig(alpha=-1, beta=2, q=0, mode="bogus")
        msg = str(err.value)
        for key in ("alpha", "beta", "q", "mode"):
            assert key in msg

    def test_es_epoch_bound(self):
        with pytest.raises(ConfigError, match="es_epoch"):
            DistillConfig(epochs=4, es_epoch=5)

    def test_lr_schedule(self):
        cfg = DistillConfig(lr=0.1, lr_drop_epochs=(3, 5), lr_drop_factor=0.1)
        assert [lr_at(cfg, e) for e in (1, 3, 4, 5, 6)] == [0.1, 0.1, 0.1 * 0.1, 0.1 * 0.1, 0.1 * 0.1 ** 2]


class TestTeacher:
    def test_separable_reaches_high_accuracy(self):
        rng = SeededRng(5)
        X = rng.normal((2, 200))
        y = (X[0] + 0.5 * X[1] > 0).astype(int)
        X[:, y == 1] += 0.3  # margin
        ds = Dataset(X, y, 2)
        _, log = train_teacher(NetSpec(2, (8,), 2), ds, None, DistillConfig(mode="none", epochs=50, lr=0.1))
        assert max(r.train_acc for r in log.records) >= 0.99

    def test_zero_epochs(self, data):
        net, log = train_teacher(STUDENT, data[0], data[1], _cfg(mode="none", epochs=0))
        assert len(log) == 0 and net.epoch == 0

    def test_requires_mode_none(self, data):
        with pytest.raises(ConfigError):
            train_teacher(STUDENT, data[0], data[1], _cfg())

    def test_deterministic(self, data):
        a = train_teacher(STUDENT, *data, _cfg(mode="none"))[1].to_rows()
        b = train_teacher(STUDENT, *data, _cfg(mode="none"))[1].to_rows()
        assert a == b

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reports_epoch(self, data):
        tr = Dataset(data[0].X * 1e200, data[0].labels, 4)
        with pytest.raises(TrainingDiverged) as err:
            train_teacher(STUDENT, tr, None, _cfg(mode="none", lr=10.0))
        assert err.value.epoch == 1


class TestDistill:
    @pytest.mark.parametrize("mode", ["feature", "feature_noproj", "logit", "logit_proj"])
    def test_teacher_unchanged(self, data, teacher, mode):
        before = _params_bytes(teacher)
        spec = NetSpec(6, (12,), 4) if mode == "feature_noproj" else STUDENT
        distill(teacher, spec, *data, _cfg(mode=mode))
        assert _params_bytes(teacher) == before

    def test_alpha_zero_is_ce_training(self, data, teacher):
        res = distill(teacher, STUDENT, *data, _cfg(mode="feature_noproj", alpha=0.0))
        net, _ = train_teacher(STUDENT, *data, _cfg(mode="none"))
        assert _params_bytes(res.student) == _params_bytes(net)

    def test_early_stop_zeroes_distill(self, data, teacher):
        log = distill(teacher, STUDENT, *data, _cfg(mode="feature", epochs=6, es_epoch=3)).log
        assert all(r.distill > 0 for r in log.records[:3])
        assert all(r.distill == 0.0 for r in log.records[3:])

    @pytest.mark.parametrize("mode", ["feature", "feature_noproj", "logit", "logit_proj"])
    def test_total_is_sum_of_components(self, data, teacher, mode):
        cfg = _cfg(mode=mode, beta=0.3)
        log = distill(teacher, STUDENT, *data, cfg).log
        for r in log.records:
            if mode.startswith("feature"):
                expected = r.ce + cfg.alpha * r.distill
            else:
                expected = cfg.beta * r.ce + (1 - cfg.beta) * r.distill
            assert abs(r.total - expected) < 1e-9

    def test_single_projector_path(self, data, teacher):
        cfg = _cfg(mode="feature", q=1)
        ens = distill(teacher, STUDENT, *data, cfg)
        member = ens.head.ensemble.members[0]
        fresh = make_head(cfg, 12, 12, 4).ensemble.members[0]
        single = distill(teacher, STUDENT, *data, cfg,
                         head=SingleProjectorHead(Projector([w.copy() for w in fresh.weights]), cfg.alpha))
        for a, b in zip(ens.log.records, single.log.records):
            assert abs(a.total - b.total) < 1e-12 and abs(a.distill - b.distill) < 1e-12
        np.testing.assert_allclose(member.weights[0], single.head.projector.weights[0], atol=1e-12, rtol=0)

    def test_frozen_identity_logit_projector(self, data, teacher):
        plain = distill(teacher, STUDENT, *data, _cfg(mode="logit")).log
        frozen = distill(teacher, STUDENT, *data, _cfg(mode="logit_proj", freeze_logit_proj=True))
        np.testing.assert_array_equal(frozen.head.lp.W_hat, np.eye(4))
        for a, b in zip(plain.records, frozen.log.records):
            assert abs(a.total - b.total) < 1e-12

    def test_logit_projector_trains(self, data, teacher):
        res = distill(teacher, STUDENT, *data, _cfg(mode="logit_proj"))
        assert isinstance(res.head, LogitProjectorHead)
        assert np.max(np.abs(res.head.lp.W_hat - np.eye(4))) > 0.01 / 2

    def test_noproj_needs_equal_dims(self, data, teacher):
        with pytest.raises(ConfigError, match="d=8"):
            distill(teacher, NetSpec(6, (8,), 4), *data, _cfg(mode="feature_noproj"))

    def test_paper_default_runs(self, data, teacher):
        res = distill(teacher, STUDENT, *data, _cfg(mode="feature", q=3, alpha=25.0))
        assert res.head.ensemble.q == 3 and len(res.log) == 6
        assert all(0 <= r.train_acc <= 1 and 0 <= r.test_acc <= 1 for r in res.log.records)

    def test_projectors_not_in_student(self, data, teacher):
        res = distill(teacher, STUDENT, *data, _cfg(mode="feature"))
        assert len(res.student.params()) == 4

    def test_cka_logged(self, data, teacher):
        log = distill(teacher, STUDENT, *data, _cfg(mode="feature", epochs=5, cka_every=2)).log
        assert [r.epoch for r in log.records if r.cka is not None] == [2, 4, 5]
        assert [e for e, _ in log.cka_report().values] == [2, 4, 5]

    def test_log_csv(self, data, teacher, tmp_path):
        log = distill(teacher, STUDENT, *data, _cfg(mode="feature", epochs=2)).log
        log.to_csv(tmp_path / "log.csv")
        rows = list(csv.reader(open(tmp_path / "log.csv")))
        assert rows[0] == ["epoch", "train_acc", "test_acc", "ce", "distill", "total", "cka"]
        assert float(rows[2][5]) == log[1].total

    def test_mismatched_classes(self, data, teacher):
        with pytest.raises(ConfigError):
            distill(teacher, NetSpec(6, (12,), 3), *data, _cfg())


class TestEvaluate:
    def test_matches_argmax_recount(self, data, teacher):
        res = evaluate(teacher, data[1])
        _, Z, _ = forward(teacher, data[1].X)
        hits = 0
        for j in range(data[1].n):
            col = list(Z[:, j])
            hits += col.index(max(col)) == data[1].labels[j]
        assert res.accuracy == hits / data[1].n

    def test_repeatable(self, data, teacher):
        a, b = evaluate(teacher, data[0]), evaluate(teacher, data[0])
        assert a.logits.tobytes() == b.logits.tobytes() and a.features.tobytes() == b.features.tobytes()


class TestSweep:
    def test_alpha_axis(self, data, teacher, tmp_path):
        rows = run_sweep(teacher, STUDENT, *data, _cfg(mode="feature_noproj"), "alpha", [0.0, 5.0, 25.0, 125.0])
        assert len(rows) == 4
        base = train_teacher(STUDENT, *data, _cfg(mode="none"))[1]
        assert rows[0].final_test_acc == base[-1].test_acc
        sweep_to_csv(rows, tmp_path / "s.csv")
        lines = open(tmp_path / "s.csv").read().splitlines()
        assert lines[0] == "axis_value,final_train_acc,final_test_acc" and len(lines) == 5

    def test_q_axis_repeatable(self, data, teacher):
        a = run_sweep(teacher, STUDENT, *data, _cfg(epochs=2), "q", [1, 2, 3, 4])
        b = run_sweep(teacher, STUDENT, *data, _cfg(epochs=2), "q", [1, 2, 3, 4])
        assert [(r.final_train_acc, r.final_test_acc) for r in a] == [(r.final_train_acc, r.final_test_acc) for r in b]
        assert [r.result.head.ensemble.q for r in a] == [1, 2, 3, 4]

    def test_unknown_axis(self, data, teacher):
        with pytest.raises(ConfigError, match="axis"):
            run_sweep(teacher, STUDENT, *data, _cfg(), "lr", [0.1])

    def test_empty_values(self, data, teacher):
        with pytest.raises(ConfigError):
            run_sweep(teacher, STUDENT, *data, _cfg(), "alpha", [])
