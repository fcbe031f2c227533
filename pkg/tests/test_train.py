from __future__ import annotations

import json
import math

import numpy as np
import pytest
from helpers import feature_dataset
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import trapezoid

from seizurecast.dataset import mine_pairs
from seizurecast.train import (
    Metrics,
    TrainConfig,
    TrainingDiverged,
    confusion,
    cross_validate,
    cv_rows,
    evaluate,
    finetune_batch,
    metrics_from_scores,
    roc_auc,
    train,
    transfer,
    write_results_csv,
    write_run_manifest,
)


def trapezoid_auc(scores, labels):
    """Area under the empirical ROC curve by the trapezoid rule."""
    scores, labels = np.asarray(scores, float), np.asarray(labels, bool)
    thresholds = np.r_[np.inf, np.sort(np.unique(scores))[::-1]]
    tpr = [np.mean(scores[labels] >= t) for t in thresholds]
    fpr = [np.mean(scores[~labels] >= t) for t in thresholds]
    return float(trapezoid(tpr, fpr))


class TestAuc:
    def test_example(self):
        assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75

    def test_all_ties(self):
        assert roc_auc(np.full(6, 0.3), [0, 1, 0, 1, 1, 0]) == 0.5

    def test_perfect_and_inverted(self):
        labels = np.array([1, 0, 1, 0, 0])
        m = metrics_from_scores(labels.astype(float), labels)
        assert m.accuracy == 1 and m.roc_auc == 1
        assert roc_auc(1.0 - labels, labels) == 0.0

    def test_single_class(self):
        with pytest.raises(ValueError):
            roc_auc([0.2, 0.4], [1, 1])
        assert metrics_from_scores([0.2, 0.7], [1, 1]).roc_auc is None

    def test_trapezoid_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            n = int(rng.integers(5, 60))
            labels = rng.integers(0, 2, n)
            labels[:2] = [0, 1]
            scores = np.round(rng.random(n), int(rng.integers(1, 4)))  # rounding creates ties
            assert abs(roc_auc(scores, labels) - trapezoid_auc(scores, labels)) < 1e-12

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(-400, 400), min_size=4, max_size=30), st.integers(0, 2**31))
    def test_monotone_invariance(self, scores, seed):
        labels = np.random.default_rng(seed).integers(0, 2, len(scores))
        labels[:2] = [0, 1]
        s = np.asarray(scores) / 8.0  # coarse grid so the transforms stay strictly increasing in floats
        base = roc_auc(s, labels)
        assert roc_auc(np.arctan(s / 10), labels) == pytest.approx(base, abs=1e-12)
        assert roc_auc(3 * s + 1, labels) == pytest.approx(base, abs=1e-12)


class TestMetrics:
    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=40))
    def test_confusion_identities(self, pairs):
        pred, lab = np.array(pairs).T
        tp, tn, fp, fn = confusion(pred, lab)
        m = Metrics(tp, tn, fp, fn)
        assert tp + tn + fp + fn == len(pairs)
        assert m.accuracy == pytest.approx(np.mean(pred == lab))
        if lab.any():
            assert m.sensitivity == tp / (tp + fn)
        else:
            assert math.isnan(m.sensitivity)
        if (~lab).any():
            assert m.specificity == tn / (tn + fp)

    def test_threshold(self):
        m = metrics_from_scores([0.5, 0.49, 0.9, 0.1], [1, 1, 0, 0])
        assert (m.tp, m.fn, m.fp, m.tn) == (1, 1, 1, 1)

    def test_finetune_batch_map(self):
        assert [finetune_batch(n, False) for n in (100, 1000, 2000)] == [10, 100, 200]
        assert finetune_batch(5000, True) == 400
        assert finetune_batch(100, False, override=7) == 7


class TestTrain:
    def test_one_batch_one_step(self):
        ds = feature_dataset(per_class=2)
        for model in ("model1", "model2"):
            cfg = TrainConfig(epochs=1, batch=600, model=model)
            h = train(cfg.build(), ds, cfg)
            assert h.steps == 1 and len(h.epochs) == 1

    def test_history_counts(self):
        ds = feature_dataset(per_class=3)
        cfg = TrainConfig(epochs=3, batch=5, model="model1")
        h = train(cfg.build(), ds, cfg)
        assert [e.epoch for e in h.epochs] == [0, 1, 2]
        assert h.steps == 3 * math.ceil(12 / 5)

    def test_bit_identical(self):
        ds = feature_dataset(per_class=3)
        for model in ("model1", "model2"):
            cfg = TrainConfig(epochs=2, batch=4, model=model, seed=11)
            a, b = cfg.build(), cfg.build()
            ha, hb = train(a, ds, cfg), train(b, ds, cfg)
            assert ha.losses == hb.losses
            for pa, pb in zip(a.params, b.params):
                assert np.array_equal(pa.value, pb.value)

    def test_separable_capacity(self):
        ds = feature_dataset(per_class=8, shift=1.0)
        cfg = TrainConfig(epochs=50, batch=8, model="model1", seed=1)
        model = cfg.build()
        train(model, ds, cfg)
        assert evaluate(model, ds).accuracy >= 0.99

    def test_model2_single_branch(self):
        ds = feature_dataset(per_class=4)
        cfg = TrainConfig(epochs=1, batch=3, model="model2")
        h = train(cfg.build(), ds, cfg, single=True)
        assert h.steps == math.ceil(16 / 3)

    def test_explicit_pairs(self):
        ds = feature_dataset(per_class=4)
        pairs = mine_pairs(ds, seed=3)
        cfg = TrainConfig(epochs=1, batch=4, model="model2")
        assert train(cfg.build(), ds, cfg, pairs=pairs).steps == math.ceil(len(pairs) / 4)

    def test_divergence_raises(self):
        ds = feature_dataset(per_class=2)
        ds.features = ds.features.copy()
        ds.features[0, 0, 0, 0] = np.inf
        cfg = TrainConfig(epochs=1, batch=4, model="model1", standardize=False)
        with pytest.raises(TrainingDiverged):
            train(cfg.build(), ds, cfg)

    def test_requires_features(self):
        ds = feature_dataset(per_class=2)
        ds.features = None
        with pytest.raises(ValueError):
            train(TrainConfig().build(), ds, TrainConfig())

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(batch=0)
        with pytest.raises(ValueError):
            TrainConfig(model="model3")


class TestCrossValidation:
    def test_two_folds(self):
        ds = feature_dataset(per_class=4)
        cfg = TrainConfig(epochs=1, batch=8, model="model1")
        res = cross_validate(ds, cfg, k=2)
        assert len(res.folds) == 2 and sum(m.n for m in res.folds) == len(ds)
        assert res.mean("accuracy") == pytest.approx(np.mean([m.accuracy for m in res.folds]))
        rows = cv_rows(res)
        assert [r["fold"] for r in rows] == [0, 1, "mean", "std"]


class TestTransfer:
    def test_validation_disjoint_and_nested(self, monkeypatch):
        import seizurecast.train as tr

        seen = []
        real = tr.fine_tune

        def spy(model, data, cfg, is_all=False):
            seen.append({w.window_id for w in data.windows})
            return real(model, data, cfg, is_all)

        monkeypatch.setattr(tr, "fine_tune", spy)
        ds = feature_dataset(patients=(1, 2, 3), per_class=5)
        cfg = TrainConfig(epochs=1, batch=8, model="model2", finetune_batch=4)
        res = transfer(ds, 3, cfg, n_values=(2, 4, 50, "all"))
        assert res.val_size == 2
        assert res.n_used == {"2": 2, "4": 4, "50": 8, "all": 8}
        held = [w for w in ds.windows if w.subject_id == 3]
        all_ids = {w.window_id for w in held}
        train_ids = set().union(*seen)
        assert len(all_ids - train_ids) == res.val_size
        assert seen[0] <= seen[1] <= seen[2] == seen[3]
        assert set(res.by_n) == {"2", "4", "50", "all"}


class TestOutputs:
    def test_results_csv(self, tmp_path):
        rows = [{"fold": 0, "accuracy": 0.1 + 0.2}, {"fold": "mean", "roc_auc": None}]
        text = write_results_csv(tmp_path / "r.csv", rows).read_text()
        assert text == "fold,accuracy,roc_auc\n0,0.30000000000000004,\nmean,,\n"

    def test_manifest(self, tmp_path):
        (tmp_path / "in.txt").write_text("hello\n")
        path = write_run_manifest(tmp_path / "m.json", {"a": 1}, {"seed": 0}, inputs=[tmp_path / "in.txt"])
        doc = json.loads(path.read_text())
        # git hash-object of "hello\n"
        assert doc["inputs"][str(tmp_path / "in.txt")] == "ce013625030ba8dba906f756967f9e9ca394464a"
        assert len(doc["config_hash"]) == 64 and doc["seeds"] == {"seed": 0}
