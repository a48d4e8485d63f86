"""Gradient-boosted decision trees for binary collision classification.

Stagewise second-order boosting on the logistic loss: each round fits a
small regression tree to the current gradient/hessian statistics with exact
greedy split search over sorted feature values (the dataset fits in memory,
so no histogram approximation is needed). Leaf values are Newton steps; the
ensemble prediction is sigmoid(base_score + learning_rate * sum of raw tree
outputs). Class imbalance is handled by weighting positive samples.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

MODEL_FILE_VERSION = 1

# Small L2 term on leaf weights (the conventional default); keeps Newton
# steps bounded on nearly-pure nodes. Not exposed in the train config.
_LEAF_REG = 1.0
_MIN_GAIN = 1e-12

# predict_proba guarantees the open interval (0, 1) even where the sigmoid
# would round to 0.0 or 1.0 in float64.
_PROB_EPS = 1e-12


@dataclass
class DecisionTree:
    """Flat-array binary tree: ``feature[k] == -1`` marks a leaf."""

    feature: np.ndarray    # (nodes,) int32, -1 for leaves
    threshold: np.ndarray  # (nodes,) float64
    left: np.ndarray       # (nodes,) int32, -1 for leaves
    right: np.ndarray      # (nodes,) int32, -1 for leaves
    value: np.ndarray      # (nodes,) float64, raw leaf values

    def predict_margin(self, X: np.ndarray) -> np.ndarray:
        """Raw leaf value per row; internal comparisons are ``x < threshold``."""
        idx = np.zeros(X.shape[0], dtype=np.int64)
        active = self.feature[idx] >= 0
        while np.any(active):
            rows = np.nonzero(active)[0]
            node = idx[rows]
            go_left = X[rows, self.feature[node]] < self.threshold[node]
            idx[rows] = np.where(go_left, self.left[node], self.right[node])
            active = self.feature[idx] >= 0
        return self.value[idx]

    def depth(self) -> int:
        def walk(k: int) -> int:
            if self.feature[k] < 0:
                return 0
            return 1 + max(walk(self.left[k]), walk(self.right[k]))
        return walk(0)

    def n_nodes(self) -> int:
        return self.feature.shape[0]


@dataclass
class BoostedEnsemble:
    """Trained classifier: sigmoid(base_score + learning_rate * sum of trees)."""

    trees: list[DecisionTree]
    learning_rate: float
    base_score: float
    n_features: int

    # Concatenated tree arrays with global child indices, built lazily for
    # batched prediction across all trees at once.
    _flat: Optional[tuple] = field(default=None, repr=False, compare=False)

    def _flattened(self):
        if self._flat is None and self.trees:
            feats, thrs, lefts, rights, vals, roots = [], [], [], [], [], []
            offset = 0
            for tree in self.trees:
                roots.append(offset)
                feats.append(tree.feature)
                thrs.append(tree.threshold)
                lefts.append(np.where(tree.left >= 0, tree.left + offset, -1))
                rights.append(np.where(tree.right >= 0, tree.right + offset, -1))
                vals.append(tree.value)
                offset += tree.n_nodes()
            self._flat = (
                np.concatenate(feats), np.concatenate(thrs),
                np.concatenate(lefts), np.concatenate(rights),
                np.concatenate(vals), np.array(roots, dtype=np.int64),
            )
        return self._flat

    def predict_margin(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        margin = np.full(X.shape[0], self.base_score)
        if not self.trees:
            return margin
        feature, threshold, left, right, value, roots = self._flattened()
        idx = np.broadcast_to(roots, (X.shape[0], roots.shape[0])).copy()
        active = feature[idx] >= 0
        while np.any(active):
            rows, cols = np.nonzero(active)
            node = idx[rows, cols]
            go_left = X[rows, feature[node]] < threshold[node]
            idx[rows, cols] = np.where(go_left, left[node], right[node])
            active = feature[idx] >= 0
        return margin + self.learning_rate * value[idx].sum(axis=1)

    def predict_proba(self, features: np.ndarray) -> float | np.ndarray:
        """Collision probability; scalar for a single feature vector.

        Values are clipped into the open interval (0, 1) so thresholding at
        exactly 1.0 can never fire.
        """
        features = np.asarray(features, dtype=float)
        single = features.ndim == 1
        p = _sigmoid(self.predict_margin(features))
        p = np.clip(p, _PROB_EPS, 1.0 - _PROB_EPS)
        return float(p[0]) if single else p


@dataclass(frozen=True)
class CMTrainConfig:
    """Boosting hyperparameters; ``positive_class_weight=None`` means the
    negative/positive count ratio of the training split."""

    n_trees: int = 200
    max_depth: int = 4
    learning_rate: float = 0.1
    min_samples_leaf: int = 20
    positive_class_weight: Optional[float] = None
    validation_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be at least 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be at least 1")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must be in (0, 1]")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be at least 1")
        if not 0 <= self.validation_fraction < 1:
            raise ValueError("validation_fraction must be in [0, 1)")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(x, -500.0, 500.0)))


def train_cm(X: np.ndarray, y: np.ndarray, config: CMTrainConfig) -> tuple[BoostedEnsemble, dict]:
    """Fit the boosted ensemble; returns (model, report).

    The report carries holdout AUC and logloss (NaN when the holdout is
    single-class) plus the training positive rate. Training logloss is
    checked to be non-increasing across rounds within numerical tolerance.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("X must be (n_samples, n_features) matching y")
    classes = np.unique(y)
    if classes.size < 2:
        raise ValueError("degenerate labels: dataset contains a single class")
    if not set(classes.tolist()) <= {0.0, 1.0}:
        raise ValueError("labels must be 0/1")

    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(X.shape[0])
    n_valid = int(round(config.validation_fraction * X.shape[0]))
    valid_idx, train_idx = perm[:n_valid], perm[n_valid:]
    Xt, yt = X[train_idx], y[train_idx]
    Xv, yv = X[valid_idx], y[valid_idx]

    n_pos = float(yt.sum())
    n_neg = float(yt.shape[0] - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("degenerate labels: training split contains a single class")
    pos_weight = (
        config.positive_class_weight
        if config.positive_class_weight is not None
        else n_neg / n_pos
    )
    w = np.where(yt == 1.0, pos_weight, 1.0)

    p0 = float((w * yt).sum() / w.sum())
    base = math.log(p0 / (1.0 - p0))
    F = np.full(Xt.shape[0], base)
    orders = np.vstack([
        np.argsort(Xt[:, f], kind="stable").astype(np.int64) for f in range(Xt.shape[1])
    ])
    Xt_T = np.ascontiguousarray(Xt.T)

    trees: list[DecisionTree] = []
    prev_loss = _weighted_logloss(yt, _sigmoid(F), w)
    margins = np.empty(Xt.shape[0])
    for _ in range(config.n_trees):
        p = _sigmoid(F)
        grad = w * (p - yt)
        hess = w * p * (1.0 - p)
        tree = _grow_tree(Xt_T, grad, hess, orders, config, margins)
        trees.append(tree)
        F += config.learning_rate * margins
        loss = _weighted_logloss(yt, _sigmoid(F), w)
        if loss > prev_loss + 1e-9:
            raise RuntimeError(
                f"boosting round increased training logloss ({prev_loss} -> {loss})"
            )
        prev_loss = loss

    model = BoostedEnsemble(trees=trees, learning_rate=config.learning_rate,
                            base_score=base, n_features=X.shape[1])
    report = {
        "positive_rate": float(y.mean()),
        "n_train": int(Xt.shape[0]),
        "n_valid": int(Xv.shape[0]),
        "train_logloss": prev_loss,
    }
    if Xv.shape[0] and np.unique(yv).size == 2:
        pv = model.predict_proba(Xv)
        report["auc"] = auc_score(yv, pv)
        report["logloss"] = _weighted_logloss(yv, pv, np.ones_like(yv))
    else:
        report["auc"] = float("nan")
        report["logloss"] = float("nan")
    return model, report


def _grow_tree(X_T, grad, hess, orders, config: CMTrainConfig,
               margins: Optional[np.ndarray] = None) -> DecisionTree:
    """Exact greedy tree on gradient/hessian sums.

    ``X_T`` is the feature-major (n_features, n_samples) view of the data
    and ``orders`` the matching (n_features, n) sample indices sorted per
    feature. Children inherit partitions of their parent's sorted rows, so
    nothing is re-sorted below the root. All features are scanned in one
    vectorized pass per node. When ``margins`` is given, the raw leaf value
    of every training sample is written into it (saves a predict pass).
    """
    feature, threshold, left, right, value = [], [], [], [], []
    n_total = X_T.shape[1]
    is_left = np.zeros(n_total, dtype=bool)
    msl = config.min_samples_leaf

    def new_node() -> int:
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        return len(feature) - 1

    def make_leaf(node: int, idx: np.ndarray, G: float, H: float) -> None:
        value[node] = -G / (H + _LEAF_REG)
        if margins is not None:
            margins[idx] = value[node]

    def build(node: int, node_orders: np.ndarray, depth: int) -> None:
        idx = node_orders[0]
        G = float(grad[idx].sum())
        H = float(hess[idx].sum())
        n = idx.shape[0]
        if depth >= config.max_depth or n < 2 * msl:
            make_leaf(node, idx, G, H)
            return

        xs = np.take_along_axis(X_T, node_orders, axis=1)
        gl = np.cumsum(grad[node_orders], axis=1)[:, :-1]
        hl = np.cumsum(hess[node_orders], axis=1)[:, :-1]
        gain = gl**2 / (hl + _LEAF_REG) + (G - gl) ** 2 / (H - hl + _LEAF_REG)
        gain -= G * G / (H + _LEAF_REG)
        splittable = xs[:, 1:] != xs[:, :-1]
        if msl > 1:
            splittable[:, : msl - 1] = False
            splittable[:, n - msl :] = False
        gain[~splittable] = -np.inf
        flat = int(np.argmax(gain))
        f_best, k = divmod(flat, n - 1)
        if not np.isfinite(gain[f_best, k]) or gain[f_best, k] <= _MIN_GAIN:
            make_leaf(node, idx, G, H)
            return
        thr = 0.5 * (xs[f_best, k] + xs[f_best, k + 1])

        is_left[idx] = X_T[f_best, idx] < thr
        mask = is_left[node_orders]
        n_left = int(mask[0].sum())
        left_orders = node_orders[mask].reshape(X_T.shape[0], n_left)
        right_orders = node_orders[~mask].reshape(X_T.shape[0], n - n_left)
        is_left[idx] = False  # restore scratch

        feature[node] = int(f_best)
        threshold[node] = float(thr)
        l_id = new_node()
        r_id = new_node()
        left[node] = l_id
        right[node] = r_id
        build(l_id, left_orders, depth + 1)
        build(r_id, right_orders, depth + 1)

    root = new_node()
    build(root, orders, 0)
    return DecisionTree(
        feature=np.array(feature, dtype=np.int32),
        threshold=np.array(threshold, dtype=float),
        left=np.array(left, dtype=np.int32),
        right=np.array(right, dtype=np.int32),
        value=np.array(value, dtype=float),
    )


def _weighted_logloss(y: np.ndarray, p: np.ndarray, w: np.ndarray) -> float:
    p = np.clip(p, 1e-15, 1.0 - 1e-15)
    return float((w * -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))).sum() / w.sum())


def auc_score(y: np.ndarray, scores: np.ndarray) -> float:
    """ROC AUC as the Mann-Whitney rank statistic with midranks for ties."""
    y = np.asarray(y, dtype=float).ravel()
    scores = np.asarray(scores, dtype=float).ravel()
    n_pos = float(y.sum())
    n_neg = float(y.shape[0] - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: holdout contains a single class")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(y.shape[0])
    sorted_scores = scores[order]
    i = 0
    while i < sorted_scores.shape[0]:
        j = i
        while j + 1 < sorted_scores.shape[0] and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    pos_rank_sum = float(ranks[y == 1.0].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)


def precision_at_recall(y: np.ndarray, scores: np.ndarray, recall_floor: float = 0.8) -> float:
    """Best precision among score thresholds whose recall is at least the floor."""
    y = np.asarray(y, dtype=float).ravel()
    order = np.argsort(-np.asarray(scores, dtype=float).ravel(), kind="stable")
    ys = y[order]
    tp = np.cumsum(ys)
    total_pos = float(y.sum())
    if total_pos == 0:
        raise ValueError("precision_at_recall undefined without positives")
    precision = tp / np.arange(1, ys.shape[0] + 1)
    recall = tp / total_pos
    feasible = precision[recall >= recall_floor]
    return float(feasible.max()) if feasible.size else 0.0


def evaluate_cm(model: BoostedEnsemble, X: np.ndarray, y: np.ndarray) -> dict:
    """Holdout metrics: rank-statistic AUC, logloss, precision at 80% recall."""
    y = np.asarray(y, dtype=float).ravel()
    if np.unique(y).size < 2:
        raise ValueError("AUC undefined: holdout contains a single class")
    p = model.predict_proba(np.asarray(X, dtype=float))
    return {
        "auc": auc_score(y, p),
        "logloss": _weighted_logloss(y, p, np.ones_like(y)),
        "precision_at_recall": precision_at_recall(y, p),
    }


# --- persistence -------------------------------------------------------------

def save_cm(path, model: BoostedEnsemble, extra: Optional[dict] = None) -> None:
    data = {
        "version": MODEL_FILE_VERSION,
        "kind": "collision-model",
        "n_features": model.n_features,
        "base_score": model.base_score,
        "learning_rate": model.learning_rate,
        "trees": [
            {
                "feature": t.feature.tolist(),
                "threshold": t.threshold.tolist(),
                "left": t.left.tolist(),
                "right": t.right.tolist(),
                "value": t.value.tolist(),
            }
            for t in model.trees
        ],
    }
    if extra:
        data.update(extra)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f)
        f.write("\n")


def load_cm(path) -> BoostedEnsemble:
    with open(path, encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(data, dict) or data.get("kind") != "collision-model":
        raise ValueError(f"{path}: not a collision-model file")
    if data.get("version") != MODEL_FILE_VERSION:
        raise ValueError(f"{path}: unsupported model file version {data.get('version')}")
    try:
        trees = [
            DecisionTree(
                feature=np.array(t["feature"], dtype=np.int32),
                threshold=np.array(t["threshold"], dtype=float),
                left=np.array(t["left"], dtype=np.int32),
                right=np.array(t["right"], dtype=np.int32),
                value=np.array(t["value"], dtype=float),
            )
            for t in data["trees"]
        ]
        return BoostedEnsemble(
            trees=trees,
            learning_rate=float(data["learning_rate"]),
            base_score=float(data["base_score"]),
            n_features=int(data["n_features"]),
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: malformed model file: {exc}") from exc
