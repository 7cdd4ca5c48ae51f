#!/usr/bin/env python3
"""
Shallow Classifiers
Decision tree, random forest and Gaussian naive Bayes over the five-element
component feature vectors. The classifiers are written against numpy so fitted
models are small, deterministic and serializable to plain JSON; naive Bayes
input scaling comes from scikit-learn.

Every argmax in this module breaks ties toward the highest class code, the
same severity-major rule the dataset module uses.
"""

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp
from sklearn.preprocessing import MinMaxScaler

from .config import DEFAULT_FOREST_SIZE, DEFAULT_TREE_DEPTH, NB_VARIANCE_FLOOR
from .core_model import DAMAGE_TABLE, DamageState, read_json, write_json
from .errors import DataError, EmptyInputError, NotFittedError, UsageError
from .metrics import MetricsReport, classification_metrics
from .seeding import SplitMix64, derive_seed
from .workers import parallel_map

logger = logging.getLogger(__name__)

MODEL_FORMAT = "damage-inspection-shallow-model"
MODEL_VERSION = 1

# Relative slack when comparing split scores and log posteriors for ties
_TIE_TOLERANCE = 1e-12


def as_xy(data) -> Tuple[np.ndarray, np.ndarray]:
    """
    Normalize training data to (X float64 [n, d], y int64 [n]).

    Accepts a sequence of labeled feature vectors (anything with
    `as_array()` and `label`) or an explicit (X, y) pair.
    """
    if isinstance(data, tuple) and len(data) == 2:
        X = np.asarray(data[0], dtype=np.float64)
        y = np.asarray(data[1], dtype=np.int64)
    else:
        items = list(data)
        if not items:
            raise EmptyInputError("no training samples")
        if any(getattr(item, "label", None) is None for item in items):
            raise DataError("every training feature vector needs a damage-state label")
        X = np.array([item.as_array() for item in items], dtype=np.float64)
        y = np.array([int(item.label) for item in items], dtype=np.int64)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if len(X) == 0:
        raise EmptyInputError("no training samples")
    if len(X) != len(y):
        raise DataError(f"{len(X)} feature rows for {len(y)} labels")
    if not np.all(np.isfinite(X)):
        raise DataError("feature values must be finite")
    return X, y


def _features(x) -> np.ndarray:
    if hasattr(x, "as_array"):
        x = x.as_array()
    X = np.asarray(x, dtype=np.float64)
    return X.reshape(1, -1) if X.ndim == 1 else X


def _argmax_high(scores: np.ndarray) -> np.ndarray:
    """Row-wise argmax, ties resolved to the last (highest-code) column."""
    scores = np.asarray(scores, dtype=np.float64)
    best = scores.max(axis=1, keepdims=True)
    slack = _TIE_TOLERANCE * np.maximum(1.0, np.abs(best))
    hits = scores >= best - slack
    return scores.shape[1] - 1 - np.argmax(hits[:, ::-1], axis=1)


class ShallowModel(ABC):
    kind = "abstract"

    def __init__(self):
        self.classes_: Optional[np.ndarray] = None
        self.n_features_: Optional[int] = None

    @property
    def fitted(self) -> bool:
        return self.classes_ is not None

    def _check_fitted(self) -> None:
        if not self.fitted:
            raise NotFittedError(f"{self.kind} model has not been fitted")

    def _check_width(self, X: np.ndarray) -> None:
        if X.shape[1] != self.n_features_:
            raise DataError(f"{self.kind} model expects {self.n_features_} features, got {X.shape[1]}")

    @abstractmethod
    def fit(self, X: np.ndarray, y: np.ndarray) -> "ShallowModel":
        ...

    @abstractmethod
    def predict_codes(self, X) -> np.ndarray:
        ...

    @abstractmethod
    def to_dict(self) -> dict:
        ...


# ---------------------------------------------------------------------------
# Decision tree
# ---------------------------------------------------------------------------

def _best_split(X: np.ndarray, y_idx: np.ndarray, n_classes: int,
                features: Sequence[int]) -> Optional[Tuple[float, int, float]]:
    """
    Lowest weighted-Gini split over `features` as (score, feature, threshold).

    score = n - sum(left_counts^2)/n_left - sum(right_counts^2)/n_right,
    i.e. n times the weighted child impurity. Earlier features and lower
    thresholds win ties.
    """
    n = len(y_idx)
    totals = np.bincount(y_idx, minlength=n_classes)[None, :]
    onehot = np.zeros((n, n_classes), dtype=np.float64)
    best = None
    for feature in features:
        values = X[:, feature]
        order = np.argsort(values, kind="stable")
        xs = values[order]
        valid = np.flatnonzero(xs[:-1] < xs[1:])
        if valid.size == 0:
            continue
        onehot[:] = 0.0
        onehot[np.arange(n), y_idx[order]] = 1.0
        left = np.cumsum(onehot, axis=0)[valid]
        right = totals - left
        n_left = (valid + 1).astype(np.float64)
        n_right = n - n_left
        scores = n - (left ** 2).sum(axis=1) / n_left - (right ** 2).sum(axis=1) / n_right
        lowest = scores.min()
        pick = int(np.flatnonzero(scores <= lowest + _TIE_TOLERANCE * max(1.0, n))[0])
        if best is None or scores[pick] < best[0] - _TIE_TOLERANCE * max(1.0, n):
            a, b = xs[valid[pick]], xs[valid[pick] + 1]
            threshold = (a + b) / 2.0
            if not a <= threshold < b:
                threshold = a
            best = (float(scores[pick]), int(feature), float(threshold))
    return best


class DecisionTreeModel(ShallowModel):
    """
    Greedy Gini tree with midpoint thresholds; samples with x <= threshold
    go left. Nodes live in flat arrays, feature -1 marks a leaf.
    """
    kind = "tree"

    def __init__(self, max_depth: Optional[int] = DEFAULT_TREE_DEPTH, max_features: Optional[int] = None,
                 rng: Optional[SplitMix64] = None):
        super().__init__()
        if max_depth is not None and max_depth < 0:
            raise UsageError("max_depth must be >= 0")
        self.max_depth = max_depth
        self.max_features = max_features
        self.rng = rng
        self.feature_ = np.zeros(0, dtype=np.int64)
        self.threshold_ = np.zeros(0, dtype=np.float64)
        self.left_ = np.zeros(0, dtype=np.int64)
        self.right_ = np.zeros(0, dtype=np.int64)
        self.value_ = np.zeros(0, dtype=np.int64)

    def _candidate_features(self, d: int) -> List[int]:
        if self.max_features is None or self.max_features >= d or self.rng is None:
            return list(range(d))
        return sorted(self.rng.sample_indices(d, self.max_features))

    def fit(self, X: np.ndarray, y: np.ndarray) -> "DecisionTreeModel":
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        classes, y_idx = np.unique(y, return_inverse=True)
        n_classes = len(classes)
        d = X.shape[1]

        feature, threshold, left, right, value = [], [], [], [], []

        def new_node(rows: np.ndarray) -> int:
            counts = np.bincount(y_idx[rows], minlength=n_classes)
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(int(classes[np.flatnonzero(counts == counts.max())[-1]]))
            return len(feature) - 1

        root = new_node(np.arange(len(y)))
        stack = [(root, np.arange(len(y)), 0)]
        while stack:
            node, rows, depth = stack.pop()
            if len(rows) < 2 or np.all(y_idx[rows] == y_idx[rows[0]]):
                continue
            if self.max_depth is not None and depth >= self.max_depth:
                continue
            subset = self._candidate_features(d)
            split = _best_split(X[rows], y_idx[rows], n_classes, subset)
            if split is None and len(subset) < d:
                rest = [f for f in range(d) if f not in subset]
                split = _best_split(X[rows], y_idx[rows], n_classes, rest)
            if split is None:
                continue
            _, f, thr = split
            goes_left = X[rows, f] <= thr
            left_rows, right_rows = rows[goes_left], rows[~goes_left]
            feature[node] = f
            threshold[node] = thr
            left[node] = new_node(left_rows)
            right[node] = new_node(right_rows)
            # right pushed first so the left subtree is numbered and expanded first
            stack.append((right[node], right_rows, depth + 1))
            stack.append((left[node], left_rows, depth + 1))

        self.feature_ = np.array(feature, dtype=np.int64)
        self.threshold_ = np.array(threshold, dtype=np.float64)
        self.left_ = np.array(left, dtype=np.int64)
        self.right_ = np.array(right, dtype=np.int64)
        self.value_ = np.array(value, dtype=np.int64)
        self.classes_ = classes
        self.n_features_ = d
        return self

    @property
    def node_count(self) -> int:
        return int(len(self.feature_))

    @property
    def depth(self) -> int:
        """Edges on the longest root-to-leaf path."""
        if not self.node_count:
            return 0
        depths = np.zeros(self.node_count, dtype=np.int64)
        for node in range(self.node_count):
            if self.feature_[node] >= 0:
                depths[self.left_[node]] = depths[node] + 1
                depths[self.right_[node]] = depths[node] + 1
        return int(depths.max())

    def apply(self, X) -> np.ndarray:
        """Leaf index reached by every row."""
        self._check_fitted()
        X = _features(X)
        self._check_width(X)
        nodes = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            active = self.feature_[nodes] >= 0
            if not active.any():
                return nodes
            r = rows[active]
            n = nodes[active]
            go_left = X[r, self.feature_[n]] <= self.threshold_[n]
            nodes[active] = np.where(go_left, self.left_[n], self.right_[n])

    def predict_codes(self, X) -> np.ndarray:
        return self.value_[self.apply(X)]

    def to_dict(self) -> dict:
        self._check_fitted()
        return {
            "kind": self.kind,
            "max_depth": self.max_depth,
            "classes": self.classes_.tolist(),
            "n_features": self.n_features_,
            "nodes": {
                "feature": self.feature_.tolist(),
                "threshold": self.threshold_.tolist(),
                "left": self.left_.tolist(),
                "right": self.right_.tolist(),
                "value": self.value_.tolist(),
            },
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "DecisionTreeModel":
        model = cls(max_depth=raw.get("max_depth"))
        nodes = raw["nodes"]
        model.feature_ = np.array(nodes["feature"], dtype=np.int64)
        model.threshold_ = np.array(nodes["threshold"], dtype=np.float64)
        model.left_ = np.array(nodes["left"], dtype=np.int64)
        model.right_ = np.array(nodes["right"], dtype=np.int64)
        model.value_ = np.array(nodes["value"], dtype=np.int64)
        model.classes_ = np.array(raw["classes"], dtype=np.int64)
        model.n_features_ = int(raw["n_features"])
        return model


# ---------------------------------------------------------------------------
# Random forest
# ---------------------------------------------------------------------------

def _fit_forest_member(job) -> dict:
    X, y, tree_seed, bootstrap, max_features, max_depth = job
    rng = SplitMix64(tree_seed)
    rows = rng.integers(len(y), len(y)) if bootstrap else np.arange(len(y))
    tree = DecisionTreeModel(max_depth=max_depth, max_features=max_features, rng=rng)
    return tree.fit(X[rows], y[rows]).to_dict()


class RandomForestModel(ShallowModel):
    """
    Bagged trees with per-split feature subsampling and a plurality vote.

    max_features=None resolves to ceil(sqrt(d)) at fit time, with or without
    bootstrap. max_features=d searches every feature at every split, so with
    bootstrap=False each tree equals a plain decision tree of the same depth.
    """
    kind = "forest"

    def __init__(self, n_trees: int = DEFAULT_FOREST_SIZE, seed: int = 0, bootstrap: bool = True,
                 max_features: Optional[int] = None, max_depth: Optional[int] = None, jobs: int = 1):
        super().__init__()
        if n_trees < 1:
            raise UsageError("a forest needs at least one tree")
        self.n_trees = n_trees
        self.seed = int(seed)
        self.bootstrap = bootstrap
        self.max_features = max_features
        self.max_depth = max_depth
        self.jobs = jobs
        self.trees: List[DecisionTreeModel] = []

    def fit(self, X: np.ndarray, y: np.ndarray) -> "RandomForestModel":
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        d = X.shape[1]
        if self.max_features is None:
            self.max_features = int(math.ceil(math.sqrt(d)))
        jobs = [(X, y, derive_seed(self.seed, "tree", t), self.bootstrap, self.max_features, self.max_depth)
                for t in range(self.n_trees)]
        self.trees = [DecisionTreeModel.from_dict(raw) for raw in parallel_map(_fit_forest_member, jobs, self.jobs)]
        self.classes_ = np.unique(y)
        self.n_features_ = d
        logger.info("Fitted forest: %d trees, %d features per split, bootstrap=%s",
                    self.n_trees, self.max_features, self.bootstrap)
        return self

    def vote_counts(self, X) -> np.ndarray:
        """Votes per row and class (columns follow classes_)."""
        self._check_fitted()
        X = _features(X)
        self._check_width(X)
        votes = np.zeros((len(X), len(self.classes_)), dtype=np.int64)
        for tree in self.trees:
            columns = np.searchsorted(self.classes_, tree.predict_codes(X))
            np.add.at(votes, (np.arange(len(X)), columns), 1)
        return votes

    def predict_codes(self, X) -> np.ndarray:
        return self.classes_[_argmax_high(self.vote_counts(X))]

    def to_dict(self) -> dict:
        self._check_fitted()
        return {
            "kind": self.kind,
            "n_trees": self.n_trees,
            "seed": self.seed,
            "bootstrap": self.bootstrap,
            "max_features": self.max_features,
            "max_depth": self.max_depth,
            "classes": self.classes_.tolist(),
            "n_features": self.n_features_,
            "trees": [tree.to_dict() for tree in self.trees],
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "RandomForestModel":
        model = cls(n_trees=raw["n_trees"], seed=raw["seed"], bootstrap=raw["bootstrap"],
                    max_features=raw["max_features"], max_depth=raw.get("max_depth"))
        model.trees = [DecisionTreeModel.from_dict(t) for t in raw["trees"]]
        model.classes_ = np.array(raw["classes"], dtype=np.int64)
        model.n_features_ = int(raw["n_features"])
        return model


# ---------------------------------------------------------------------------
# Gaussian naive Bayes
# ---------------------------------------------------------------------------

class NaiveBayesModel(ShallowModel):
    """
    Per-class, per-feature Gaussians with a variance floor.

    With normalized=True a MinMaxScaler is fitted on the training rows and
    applied to every later input; constant features keep a unit range. The
    model file stores the per-feature bounds and rebuilds the scaler from them.
    """
    kind = "nb"

    def __init__(self, normalized: bool = False, var_floor: float = NB_VARIANCE_FLOOR,
                 classes: Optional[Sequence[int]] = None):
        super().__init__()
        self.normalized = normalized
        self.var_floor = var_floor
        self.requested_classes = None if classes is None else tuple(int(c) for c in classes)
        self.scaler_: Optional[MinMaxScaler] = None
        self.log_prior_: Optional[np.ndarray] = None
        self.means_: Optional[np.ndarray] = None
        self.variances_: Optional[np.ndarray] = None

    def _transform(self, X: np.ndarray) -> np.ndarray:
        if not self.normalized:
            return X
        return self.scaler_.transform(X)

    def fit(self, X: np.ndarray, y: np.ndarray) -> "NaiveBayesModel":
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        classes = np.unique(y)
        if self.requested_classes is not None:
            empty = sorted(set(self.requested_classes) - set(classes.tolist()))
            if empty:
                raise EmptyInputError(f"naive Bayes classes {empty} have no training samples")
            classes = np.array(sorted(self.requested_classes), dtype=np.int64)
        if self.normalized:
            self.scaler_ = MinMaxScaler().fit(X)
        Xn = self._transform(X)
        self.means_ = np.array([Xn[y == c].mean(axis=0) for c in classes])
        self.variances_ = np.maximum(np.array([Xn[y == c].var(axis=0) for c in classes]), self.var_floor)
        self.log_prior_ = np.log(np.array([np.count_nonzero(y == c) for c in classes]) / len(y))
        self.classes_ = classes
        self.n_features_ = X.shape[1]
        return self

    def joint_log_likelihood(self, X) -> np.ndarray:
        self._check_fitted()
        X = _features(X)
        self._check_width(X)
        Xn = self._transform(X)
        diff = Xn[:, None, :] - self.means_[None, :, :]
        log_density = -0.5 * (np.log(2.0 * np.pi * self.variances_)[None, :, :]
                              + diff ** 2 / self.variances_[None, :, :])
        return self.log_prior_[None, :] + log_density.sum(axis=2)

    def posteriors(self, X) -> np.ndarray:
        jll = self.joint_log_likelihood(X)
        return np.exp(jll - logsumexp(jll, axis=1, keepdims=True))

    def predict_codes(self, X) -> np.ndarray:
        return self.classes_[_argmax_high(self.joint_log_likelihood(X))]

    def to_dict(self) -> dict:
        self._check_fitted()
        return {
            "kind": self.kind,
            "normalized": self.normalized,
            "var_floor": self.var_floor,
            "classes": self.classes_.tolist(),
            "n_features": self.n_features_,
            "log_prior": self.log_prior_.tolist(),
            "means": self.means_.tolist(),
            "variances": self.variances_.tolist(),
            "normalization": ({"method": "min-max", "data_min": self.scaler_.data_min_.tolist(),
                               "data_max": self.scaler_.data_max_.tolist()}
                              if self.normalized else None),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "NaiveBayesModel":
        model = cls(normalized=raw["normalized"], var_floor=raw["var_floor"])
        model.classes_ = np.array(raw["classes"], dtype=np.int64)
        model.n_features_ = int(raw["n_features"])
        model.log_prior_ = np.array(raw["log_prior"], dtype=np.float64)
        model.means_ = np.array(raw["means"], dtype=np.float64)
        model.variances_ = np.array(raw["variances"], dtype=np.float64)
        if raw.get("normalization"):
            bounds = raw["normalization"]
            # refitting on the two stored bound rows reproduces the training scaler exactly
            rows = np.array([bounds["data_min"], bounds["data_max"]], dtype=np.float64)
            model.scaler_ = MinMaxScaler().fit(rows)
        return model


MODEL_KINDS = {m.kind: m for m in (DecisionTreeModel, RandomForestModel, NaiveBayesModel)}


# ---------------------------------------------------------------------------
# Functional surface
# ---------------------------------------------------------------------------

def fit_decision_tree(data, max_depth: Optional[int] = DEFAULT_TREE_DEPTH) -> DecisionTreeModel:
    X, y = as_xy(data)
    model = DecisionTreeModel(max_depth=max_depth).fit(X, y)
    logger.info("Fitted decision tree on %d samples: %d nodes, depth %d", len(y), model.node_count, model.depth)
    return model


def fit_random_forest(data, n_trees: int = DEFAULT_FOREST_SIZE, seed: int = 0, bootstrap: bool = True,
                      max_features: Optional[int] = None, max_depth: Optional[int] = None,
                      jobs: int = 1) -> RandomForestModel:
    X, y = as_xy(data)
    return RandomForestModel(n_trees=n_trees, seed=seed, bootstrap=bootstrap, max_features=max_features,
                             max_depth=max_depth, jobs=jobs).fit(X, y)


def fit_naive_bayes(data, normalized: bool = False, classes: Optional[Sequence[int]] = None,
                    var_floor: float = NB_VARIANCE_FLOOR) -> NaiveBayesModel:
    X, y = as_xy(data)
    model = NaiveBayesModel(normalized=normalized, var_floor=var_floor, classes=classes).fit(X, y)
    logger.info("Fitted naive Bayes (normalized=%s) on %d samples, %d classes",
                normalized, len(y), len(model.classes_))
    return model


FIT_FUNCTIONS = {
    "tree": fit_decision_tree,
    "forest": fit_random_forest,
    "nb": fit_naive_bayes,
}


def predict(model: ShallowModel, fv) -> DamageState:
    """Damage state of one feature vector (or a single row of features)."""
    if model is None or not model.fitted:
        raise NotFittedError("predict() needs a fitted model")
    return DamageState(int(model.predict_codes(fv)[0]))


def predict_many(model: ShallowModel, data) -> np.ndarray:
    if not model.fitted:
        raise NotFittedError("predict() needs a fitted model")
    if not isinstance(data, np.ndarray):
        data = [item.as_array() if hasattr(item, "as_array") else item for item in data]
    return model.predict_codes(np.asarray(data, dtype=np.float64))


def save_model(model: ShallowModel, path: str) -> None:
    document = {"format": MODEL_FORMAT, "version": MODEL_VERSION, "model": model.to_dict()}
    write_json(path, document)
    logger.info("Saved %s model to %s", model.kind, path)


def load_model(path: str) -> ShallowModel:
    document = read_json(path, "model")
    if not isinstance(document, dict) or document.get("format") != MODEL_FORMAT:
        raise DataError(f"{path}: not a shallow model file")
    if document.get("version") != MODEL_VERSION:
        raise DataError(f"{path}: unsupported model version {document.get('version')}")
    raw = document["model"]
    if raw.get("kind") not in MODEL_KINDS:
        raise DataError(f"{path}: unknown model kind '{raw.get('kind')}'")
    return MODEL_KINDS[raw["kind"]].from_dict(raw)


@dataclass
class CrossValidationResult:
    kind: str
    fold_reports: List[MetricsReport]
    pooled: MetricsReport

    @property
    def mean_average_accuracy(self) -> float:
        return float(np.mean([r.average_accuracy for r in self.fold_reports]))

    @property
    def mean_macro_f1(self) -> float:
        return float(np.mean([r.macro_f1 for r in self.fold_reports]))

    def to_dict(self) -> Dict[str, object]:
        return {
            "kind": self.kind,
            "folds": [r.to_dict() for r in self.fold_reports],
            "pooled": self.pooled.to_dict(),
            "mean_average_accuracy": self.mean_average_accuracy,
            "mean_macro_f1": self.mean_macro_f1,
        }


def cross_validate(kind: str, data, folds: int = 3, seed: int = 0, **params) -> CrossValidationResult:
    """Seeded k-fold evaluation; every sample is predicted exactly once by a model that never saw it."""
    if kind not in FIT_FUNCTIONS:
        raise UsageError(f"unknown model kind '{kind}' (expected one of {sorted(FIT_FUNCTIONS)})")
    X, y = as_xy(data)
    if folds < 2 or folds > len(y):
        raise UsageError(f"folds must be in 2..{len(y)}, got {folds}")
    order = list(range(len(y)))
    SplitMix64(derive_seed(seed, "folds")).shuffle(order)
    parts = np.array_split(np.array(order, dtype=np.int64), folds)

    reports = []
    predictions = np.empty_like(y)
    for k, test_rows in enumerate(parts):
        train_rows = np.setdiff1d(np.arange(len(y)), test_rows)
        model = FIT_FUNCTIONS[kind]((X[train_rows], y[train_rows]), **params)
        fold_pred = model.predict_codes(X[test_rows])
        predictions[test_rows] = fold_pred
        reports.append(classification_metrics(fold_pred.tolist(), y[test_rows].tolist(), DAMAGE_TABLE))
        logger.info("Fold %d/%d: accuracy %.4f", k + 1, folds, reports[-1].average_accuracy)
    pooled = classification_metrics(predictions.tolist(), y.tolist(), DAMAGE_TABLE)
    return CrossValidationResult(kind, reports, pooled)
