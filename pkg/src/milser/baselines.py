"""Embedding-pooling baselines: max/mean pool each bag, classify with a random forest.

Trees are stored as flat node arrays so they serialise directly; a sample
goes left when ``x[feature] <= threshold``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bagging import Bag, BagSet
from .errors import DegenerateData, ShapeMismatch


@dataclass
class PooledEmbedding:
    utterance_id: str
    vector: np.ndarray
    label: int


def pool_embeddings(bag: Bag, mode: str = "max") -> PooledEmbedding:
    rows = bag.embeddings[bag.mask]
    return PooledEmbedding(bag.utterance_id, _pool(rows[None], np.ones((1, len(rows)), bool), mode)[0], bag.label)


def _pool(X, mask, mode):
    if mode == "max":
        return np.where(mask[..., None], X, -np.inf).max(axis=1)
    if mode in ("avg", "mean"):
        m = mask[..., None]
        return (X * m).sum(axis=1) / m.sum(axis=1)
    raise ValueError(f"unknown pooling mode {mode!r}")


def pool_bagset(bags: BagSet, mode: str, masked: bool = True) -> np.ndarray:
    """Pool every bag at once; (N, M) float64."""
    mask = bags.mask if masked else np.ones_like(bags.mask)
    return _pool(bags.X.astype(np.float64), mask, mode)


@dataclass
class Tree:
    feature: np.ndarray  # (n_nodes,) int, -1 marks a leaf
    threshold: np.ndarray  # (n_nodes,) float64
    left: np.ndarray  # (n_nodes,) int
    right: np.ndarray  # (n_nodes,) int
    value: np.ndarray  # (n_nodes, K) class distribution at every node

    @property
    def n_nodes(self):
        return len(self.feature)

    def apply(self, X):
        """Leaf index reached by each row of X."""
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            feat = self.feature[node]
            live = feat >= 0
            if not live.any():
                return node
            f = np.where(live, feat, 0)
            go_left = X[rows, f] <= self.threshold[node]
            nxt = np.where(go_left, self.left[node], self.right[node])
            node = np.where(live, nxt, node)

    def predict_proba(self, X):
        return self.value[self.apply(X)]


@dataclass
class RandomForest:
    trees: list = field(default_factory=list)
    n_classes: int = 0
    n_features: int = 0
    n_trees: int = 200
    max_depth: int = 16
    seed: int = 0

    def predict_proba(self, X):
        X = np.asarray(X, dtype=np.float32).astype(np.float64)
        if X.ndim == 1:
            X = X[None]
        if X.shape[1] != self.n_features:
            raise ShapeMismatch(f"forest expects {self.n_features} features, got {X.shape[1]}")
        total = np.zeros((len(X), self.n_classes))
        for tree in self.trees:
            total += tree.predict_proba(X)
        return total / len(self.trees)

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)


def _tree_from_sklearn(est, classes, n_classes) -> Tree:
    t = est.tree_
    leaf = t.children_left < 0
    value = np.zeros((t.node_count, n_classes))
    raw = t.value[:, 0, :]
    value[:, classes] = raw / raw.sum(axis=1, keepdims=True)
    return Tree(
        np.where(leaf, -1, t.feature).astype(np.int64),
        np.where(leaf, 0.0, t.threshold).astype(np.float64),
        t.children_left.astype(np.int64),
        t.children_right.astype(np.int64),
        value,
    )


def rf_train(X, y, n_trees=200, max_depth=16, seed=0, n_classes=None, max_features="sqrt") -> RandomForest:
    """Bootstrap-aggregated Gini trees with sqrt(M) candidate features per split.

    Fitting is delegated to scikit-learn; the fitted trees are copied into
    plain node arrays, which are what prediction and serialisation use.
    Inputs are rounded to float32 first, matching the precision the fitted
    thresholds were chosen at.
    """
    from sklearn.ensemble import RandomForestClassifier

    X = np.asarray(X, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    K = int(n_classes if n_classes is not None else y.max() + 1)
    if np.unique(y).size < 2:
        raise DegenerateData("random forest needs at least two classes")
    clf = RandomForestClassifier(
        n_estimators=n_trees, criterion="gini", max_depth=max_depth, max_features=max_features,
        bootstrap=True, random_state=int(seed) % (2**32), n_jobs=1,
    )
    clf.fit(X, y)
    classes = clf.classes_.astype(np.int64)
    trees = [_tree_from_sklearn(est, classes, K) for est in clf.estimators_]
    return RandomForest(trees, K, X.shape[1], n_trees, max_depth, seed)


def rf_predict(forest: RandomForest, vector) -> np.ndarray:
    return forest.predict_proba(np.asarray(vector))[0]


@dataclass
class PooledForest:
    """A forest over pooled bag embeddings, usable wherever a bag classifier is."""

    forest: RandomForest
    mode: str = "max"
    masked: bool = True

    def predict_proba_bags(self, bags: BagSet):
        return self.forest.predict_proba(pool_bagset(bags, self.mode, self.masked))

    def predict_bags(self, bags: BagSet):
        return self.predict_proba_bags(bags).argmax(axis=1)


def train_pooled_rf(bags: BagSet, mode: str, n_trees=200, max_depth=16, seed=0, n_classes=None,
                    masked=True) -> PooledForest:
    forest = rf_train(pool_bagset(bags, mode, masked), bags.y, n_trees, max_depth, seed, n_classes)
    return PooledForest(forest, mode, masked)
