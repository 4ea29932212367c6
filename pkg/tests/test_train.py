import math

import numpy as np
import pytest
from pydantic import ValidationError

from ccdet import ndtensor as nd
from ccdet.dataset import APD, HC, SplitPlan, subjects_by_class
from ccdet.detector import build
from ccdet.eigencam import average_cam
from ccdet.errors import DatasetError, DivergenceError, MetricError
from ccdet.train import (SGD, HoldoutConfig, TrainConfig, evaluate, holdout, iter_batches, sgd_step,
                         train_round)

# one epoch; close_mosaic_epochs keeps mosaic off
QUICK = TrainConfig(epochs=1, batch_size=2, lr=0.001, seed=3)


def _plan(corpus):
    by_class = subjects_by_class(corpus)
    return SplitPlan(round_id=0, train_subjects=[by_class[HC][0], by_class[APD][0]],
                     test_subjects=[by_class[HC][1], by_class[APD][1]], fraction=0.5)


# ---------- config ----------

@pytest.mark.parametrize("kwargs", [{"epochs": 0}, {"batch_size": 0}, {"lr": -0.1},
                                    {"momentum": 1.5}, {"grad_clip_norm": 0.0}, {"unknown": 1}])
def test_train_config_rejects_invalid(kwargs):
    with pytest.raises(ValidationError):
        TrainConfig(**kwargs)


def test_zero_learning_rate_is_allowed():
    assert TrainConfig(lr=0.0).lr == 0.0


def test_cosine_schedule():
    cfg = TrainConfig(epochs=11, lr=0.1, lr_schedule="cosine", lr_final_fraction=0.01)
    assert cfg.lr_at(1) == pytest.approx(0.1)
    assert cfg.lr_at(6) == pytest.approx(0.001 + 0.5 * 0.099)
    assert cfg.lr_at(11) == pytest.approx(0.001)
    assert TrainConfig(lr=0.05).lr_at(30) == 0.05


def test_holdout_config_ranges():
    with pytest.raises(ValidationError):
        HoldoutConfig(rounds=0)
    with pytest.raises(ValidationError):
        HoldoutConfig(fraction=1.0)


# ---------- optimizer ----------

def test_sgd_step_plain():
    w = nd.parameter(np.array([1.0, 2.0]), dtype=np.float64)
    w.grad = np.array([0.5, -1.0])
    sgd_step({"conv.weight": w}, {}, lr=0.1, momentum=0.9, weight_decay=0.0)
    np.testing.assert_allclose(w.data, [0.95, 2.1])


def test_sgd_step_zero_lr_is_noop():
    w = nd.parameter(np.array([1.0, -3.0]), dtype=np.float64)
    w.grad = np.array([4.0, 4.0])
    sgd_step({"conv.weight": w}, {}, lr=0.0, momentum=0.9, weight_decay=0.5)
    np.testing.assert_array_equal(w.data, [1.0, -3.0])


def test_weight_decay_skips_biases():
    w = nd.parameter(np.array([2.0, 2.0]), dtype=np.float64)
    b = nd.parameter(np.array([2.0, 2.0]), dtype=np.float64)
    w.grad, b.grad = np.zeros(2), np.zeros(2)
    sgd_step({"conv.weight": w, "conv.bias": b}, {}, lr=1.0, momentum=0.0, weight_decay=0.1)
    np.testing.assert_allclose(w.data, [1.8, 1.8])
    np.testing.assert_array_equal(b.data, [2.0, 2.0])


def test_params_without_grad_are_skipped():
    w = nd.parameter(np.array([1.0]), dtype=np.float64)
    velocity = {}
    sgd_step({"w": w}, velocity, lr=1.0, momentum=0.9, weight_decay=0.0)
    assert w.data[0] == 1.0 and velocity == {}


@pytest.mark.parametrize("momentum", [0.0, 0.9])
def test_sgd_minimizes_quadratic_bowl(momentum):
    w = nd.parameter(np.array([3.0, -2.0]), dtype=np.float64)
    opt = SGD({"w": w}, lr=0.1, momentum=momentum)
    for _ in range(300):
        opt.zero_grad()
        nd.backward((w * w).sum() * 0.5)
        opt.step()
    assert np.abs(w.data).max() < 1e-3


def test_gradient_clipping():
    w = nd.parameter(np.array([0.0, 0.0]), dtype=np.float64)
    w.grad = np.array([3.0, 4.0])
    opt = SGD({"w": w}, lr=1.0, grad_clip_norm=1.0)
    assert opt.step() == pytest.approx(5.0)
    np.testing.assert_allclose(w.data, [-0.6, -0.8])


# ---------- batching ----------

def test_iter_batches_covers_everything_once(small_corpus, rng):
    batches = list(iter_batches(small_corpus, 3, rng))
    assert [len(b) for b in batches] == [3, 3, 2]
    assert sorted(i for b in batches for i in b) == list(range(len(small_corpus)))


def test_iter_batches_refuses_test_subjects(small_corpus, rng):
    leaked = {small_corpus[0].subject_id}
    with pytest.raises(DatasetError, match=small_corpus[0].subject_id):
        list(iter_batches(small_corpus, 2, rng, leaked))


# ---------- training ----------

def test_train_round_one_epoch(small_corpus, tiny_config):
    weights, tlog = train_round(small_corpus, _plan(small_corpus), tiny_config, QUICK)
    assert len(tlog.epochs) == 1
    assert tlog.steps == 2  # 4 training images, batch 2
    e = tlog.epochs[0]
    assert math.isfinite(e.total) and e.total > 0
    assert e.total == pytest.approx(e.box_loss * 0.05 + e.obj_loss + e.cls_loss * 0.5, rel=1e-5)
    assert set(weights.params) == set(build(tiny_config).params)



def test_mosaic_used_while_open(small_corpus, tiny_config):
    cfg = QUICK.model_copy(update={"close_mosaic_epochs": 0})
    _, tlog = train_round(small_corpus, _plan(small_corpus), tiny_config, cfg)
    assert tlog.augment.mosaics == 4
    _, closed = train_round(small_corpus, _plan(small_corpus), tiny_config, QUICK)
    assert closed.augment.mosaics == 0


def test_huge_learning_rate_diverges(small_corpus, tiny_config):
    cfg = QUICK.model_copy(update={"lr": 1e30, "epochs": 2})
    with pytest.raises(DivergenceError) as info:
        train_round(small_corpus, _plan(small_corpus), tiny_config, cfg)
    assert info.value.epoch >= 1 and info.value.step >= 1
    assert f"epoch {info.value.epoch}, step {info.value.step}" in str(info.value)

def test_zero_lr_leaves_weights_untouched(small_corpus, tiny_config):
    cfg = QUICK.model_copy(update={"lr": 0.0})
    weights, _ = train_round(small_corpus, _plan(small_corpus), tiny_config, cfg)
    initial = build(tiny_config, seed=cfg.seed)
    for name, p in weights.params.items():
        np.testing.assert_array_equal(p.data, initial[name].data)


def test_train_round_is_deterministic(small_corpus, tiny_config):
    a, log_a = train_round(small_corpus, _plan(small_corpus), tiny_config, QUICK)
    b, log_b = train_round(small_corpus, _plan(small_corpus), tiny_config, QUICK)
    assert [e.total for e in log_a.epochs] == [e.total for e in log_b.epochs]
    for name in a.params:
        np.testing.assert_array_equal(a[name].data, b[name].data)


def test_train_round_checkpoint_called(small_corpus, tiny_config):
    seen = []
    train_round(small_corpus, _plan(small_corpus), tiny_config, QUICK,
                checkpoint=lambda w, epoch: seen.append(epoch))
    assert seen == [1]


def test_train_round_empty_split(small_corpus, tiny_config):
    plan = SplitPlan(round_id=0, train_subjects=["nobody"], test_subjects=["HC001"], fraction=0.5)
    with pytest.raises(DatasetError, match="empty"):
        train_round(small_corpus, plan, tiny_config, QUICK)


def test_log_csv_header(tmp_path, small_corpus, tiny_config):
    _, tlog = train_round(small_corpus, _plan(small_corpus), tiny_config, QUICK)
    lines = tlog.to_csv(tmp_path / "train_log.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "epoch,box_loss,obj_loss,cls_loss,total,seconds"
    assert len(lines) == 2


# ---------- evaluation ----------

def test_evaluate_reports_every_image(small_corpus, tiny_weights):
    report, results = evaluate(tiny_weights, small_corpus)
    assert report.n_images == len(small_corpus) == len(results)
    assert sum(map(sum, report.confusion)) + sum(report.abstained) == len(small_corpus)
    assert report.iou.n == len(small_corpus)


def test_evaluate_single_class_notes_refusal(small_corpus, tiny_weights):
    only_hc = [x for x in small_corpus if x.class_id == HC]
    report, _ = evaluate(tiny_weights, only_hc)
    assert report.roc is None and report.auc is None
    assert any("ROC/PR refused" in note for note in report.notes)


def test_evaluate_empty(tiny_weights):
    with pytest.raises(MetricError):
        evaluate(tiny_weights, [])


def test_holdout_single_round(small_corpus, tiny_config):
    rounds, summary = holdout(small_corpus, HoldoutConfig(rounds=1, fraction=0.5), tiny_config, QUICK)
    assert len(rounds) == summary.rounds == 1
    r = rounds[0]
    assert not set(r.plan.train_subjects) & set(r.plan.test_subjects)
    assert set(r.subject_votes) == set(r.plan.test_subjects)
    assert summary.mean_accuracy == r.report.accuracy


# ---------- reference run ----------

@pytest.mark.slow
def test_reference_loss_drops(reference_run):
    _, rounds, _ = reference_run
    for r in rounds:
        assert r.log.epochs[-1].total < 0.25 * r.log.epochs[0].total


@pytest.mark.slow
def test_reference_accuracy_auc_and_iou(reference_run):
    _, _, summary = reference_run
    assert summary.mean_accuracy >= 0.90
    assert summary.mean_auc >= 0.90
    assert summary.mean_iou_at_least_05 >= 0.95


@pytest.mark.slow
def test_reference_cam_hits_midbody(reference_run):
    corpus, rounds, _ = reference_run
    hits = []
    for r in rounds:
        apd = [x for x in corpus if x.subject_id in set(r.plan.test_subjects) and x.class_id == APD]
        avg = average_cam(r.weights, apd, include=lambda item, res: res.verdict.predicted_class == APD)
        hits += [s.argmax_in_region for s in avg.stats.per_image.values()]
    assert np.mean(hits) >= 0.80
