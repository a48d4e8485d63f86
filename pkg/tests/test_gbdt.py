import json
import math

import numpy as np
import pytest

from bunkerops.env import derive_rng
from bunkerops.gbdt import (
    BoostedEnsemble,
    CMTrainConfig,
    auc_score,
    evaluate_cm,
    load_cm,
    precision_at_recall,
    save_cm,
    train_cm,
)


def separable_dataset(n=10_000, seed=0):
    """Labels follow a clean rule on feature 0."""
    rng = derive_rng(seed)
    X = rng.random((n, 10))
    y = (X[:, 0] > 0.5).astype(np.int64)
    return X, y


def quick_config(**kwargs):
    defaults = dict(n_trees=30, max_depth=3, seed=0)
    defaults.update(kwargs)
    return CMTrainConfig(**defaults)


class TestTrainCM:
    def test_separable_rule_reaches_high_auc(self):
        X, y = separable_dataset()
        model, report = train_cm(X, y, quick_config())
        assert report["auc"] >= 0.99

    def test_single_class_rejected(self):
        X = derive_rng(0).random((100, 10))
        with pytest.raises(ValueError, match="degenerate"):
            train_cm(X, np.zeros(100), quick_config())

    def test_nonbinary_labels_rejected(self):
        X = derive_rng(0).random((100, 10))
        y = np.arange(100) % 3
        with pytest.raises(ValueError):
            train_cm(X, y, quick_config())

    def test_constant_features_predict_base_rate(self):
        # no split is possible, so boosting stays at the prior
        n = 2000
        X = np.ones((n, 10))
        y = (np.arange(n) < 600).astype(np.int64)  # 30% positive
        model, _ = train_cm(X, y, quick_config(positive_class_weight=1.0))
        p = model.predict_proba(X[:5])
        assert np.all(np.abs(p - 0.3) < 0.02)

    def test_n_trees_lower_bound(self):
        with pytest.raises(ValueError):
            CMTrainConfig(n_trees=0)

    def test_training_logloss_never_increases(self):
        # train_cm raises internally if a boosting round raises the loss
        X, y = separable_dataset(n=3000, seed=5)
        train_cm(X, y, quick_config(n_trees=60))

    def test_depth_bound_respected(self):
        X, y = separable_dataset(n=3000, seed=6)
        model, _ = train_cm(X, y, quick_config(max_depth=4))
        assert all(t.depth() <= 4 for t in model.trees)

    def test_min_samples_leaf_respected(self):
        X, y = separable_dataset(n=500, seed=7)
        cfg = quick_config(min_samples_leaf=100, validation_fraction=0.0)
        model, _ = train_cm(X, y, cfg)

        def leaf_counts(tree, X):
            idx = np.zeros(X.shape[0], dtype=np.int64)
            active = tree.feature[idx] >= 0
            while np.any(active):
                rows = np.nonzero(active)[0]
                node = idx[rows]
                go_left = X[rows, tree.feature[node]] < tree.threshold[node]
                idx[rows] = np.where(go_left, tree.left[node], tree.right[node])
                active = tree.feature[idx] >= 0
            return np.unique(idx, return_counts=True)[1]

        for tree in model.trees:
            if tree.n_nodes() > 1:
                assert leaf_counts(tree, X).min() >= 100

    def test_class_weight_preserves_ranking(self):
        X, y = separable_dataset(n=4000, seed=8)
        m1, _ = train_cm(X, y, quick_config(positive_class_weight=1.0))
        m5, _ = train_cm(X, y, quick_config(positive_class_weight=5.0))
        auc1 = auc_score(y, m1.predict_proba(X))
        auc5 = auc_score(y, m5.predict_proba(X))
        assert abs(auc1 - auc5) < 0.01


class TestPredict:
    def test_empty_ensemble_is_sigmoid_of_base(self):
        model = BoostedEnsemble(trees=[], learning_rate=0.1, base_score=0.4,
                                n_features=10)
        expected = 1.0 / (1.0 + math.exp(-0.4))
        assert model.predict_proba(np.zeros(10)) == pytest.approx(expected, abs=1e-12)

    def test_monotone_on_synthetic_rule(self):
        X, y = separable_dataset()
        model, _ = train_cm(X, y, quick_config())
        rng = derive_rng(3)
        lo = rng.random((50, 10))
        hi = lo.copy()
        lo[:, 0] = 0.1
        hi[:, 0] = 0.9
        assert np.all(model.predict_proba(hi) > model.predict_proba(lo))

    def test_bitwise_deterministic(self):
        X, y = separable_dataset(n=2000, seed=9)
        model, _ = train_cm(X, y, quick_config())
        q = derive_rng(4).random((20, 10))
        assert np.array_equal(model.predict_proba(q), model.predict_proba(q))

    def test_open_interval(self):
        model = BoostedEnsemble(trees=[], learning_rate=0.1, base_score=100.0,
                                n_features=3)
        p = model.predict_proba(np.zeros(3))
        assert 0.0 < p < 1.0

    def test_feature_count_checked(self):
        model = BoostedEnsemble(trees=[], learning_rate=0.1, base_score=0.0,
                                n_features=10)
        with pytest.raises(ValueError):
            model.predict_proba(np.zeros(4))


class TestMetrics:
    def test_perfect_predictor_auc_one(self):
        y = np.array([0, 0, 1, 1])
        assert auc_score(y, np.array([0.1, 0.2, 0.8, 0.9])) == 1.0

    def test_random_predictor_near_half(self):
        rng = derive_rng(11)
        y = rng.integers(0, 2, size=10_000)
        scores = rng.random(10_000)
        assert abs(auc_score(y, scores) - 0.5) < 0.02

    def test_logloss_of_coin_flip_is_ln2(self):
        model = BoostedEnsemble(trees=[], learning_rate=0.1, base_score=0.0,
                                n_features=2)
        X = np.zeros((100, 2))
        y = np.array([0, 1] * 50)
        metrics = evaluate_cm(model, X, y)
        assert metrics["logloss"] == pytest.approx(math.log(2), abs=1e-9)

    def test_single_class_holdout_rejected(self):
        model = BoostedEnsemble(trees=[], learning_rate=0.1, base_score=0.0,
                                n_features=2)
        with pytest.raises(ValueError, match="single class"):
            evaluate_cm(model, np.zeros((5, 2)), np.ones(5))

    def test_ties_get_midranks(self):
        y = np.array([0, 1, 0, 1])
        scores = np.array([0.5, 0.5, 0.2, 0.9])
        # pairs: (0@.5 vs 1@.5) tie=0.5, (0@.5 vs 1@.9) win, (0@.2 vs both) wins
        assert auc_score(y, scores) == pytest.approx((0.5 + 3.0) / 4.0)

    def test_precision_at_recall_perfect(self):
        y = np.array([0, 0, 1, 1])
        assert precision_at_recall(y, np.array([0.1, 0.2, 0.8, 0.9]), 0.8) == 1.0


class TestPersistence:
    def test_roundtrip_bitwise_predictions(self, tmp_path):
        X, y = separable_dataset(n=3000, seed=12)
        model, _ = train_cm(X, y, quick_config())
        path = tmp_path / "model.json"
        save_cm(path, model)
        loaded = load_cm(path)
        q = derive_rng(13).random((200, 10))
        assert np.array_equal(loaded.predict_proba(q), model.predict_proba(q))

    def test_malformed_file(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{\"kind\": \"collision-model\", \"version\": 1}")
        with pytest.raises(ValueError):
            load_cm(path)

    def test_not_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("not json at all")
        with pytest.raises(ValueError):
            load_cm(path)

    def test_version_mismatch(self, tmp_path):
        X, y = separable_dataset(n=2000, seed=14)
        model, _ = train_cm(X, y, quick_config(n_trees=5))
        path = tmp_path / "model.json"
        save_cm(path, model)
        data = json.loads(path.read_text())
        data["version"] = 2
        path.write_text(json.dumps(data))
        with pytest.raises(ValueError, match="version"):
            load_cm(path)
