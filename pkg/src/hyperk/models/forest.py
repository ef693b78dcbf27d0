"""Random forest of weighted-Gini trees on bootstrap samples."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ModelError
from ..seeding import rng_for
from .tree import GINI, Tree, grow_tree, presort
from .weights import ClassWeights, as_matrix, check_xy


def _gini_leaf(S):
    return S[0] / S[1]


@dataclass(frozen=True, eq=False)
class ForestModel:
    trees: tuple[Tree, ...]
    n_features: int
    max_depth: int
    feature_subsample_size: int
    seed: int

    kind = "forest"

    @property
    def n_estimators(self) -> int:
        return len(self.trees)

    def predict_proba(self, X, n_estimators: int | None = None, max_depth: int | None = None) -> np.ndarray:
        """Mean of tree probabilities; optionally only the first ``n_estimators``
        trees, each truncated at ``max_depth``."""
        X = as_matrix(X, self.n_features)
        trees = self.trees[:n_estimators] if n_estimators else self.trees
        total = np.zeros(X.shape[0])
        for t in trees:
            total += t.predict(X, max_depth)
        return total / len(trees)

    def staged_proba(self, X, max_depth: int | None = None) -> np.ndarray:
        """Cumulative-mean probabilities after 1..n trees (n_trees x n_rows)."""
        X = as_matrix(X, self.n_features)
        per_tree = np.array([t.predict(X, max_depth) for t in self.trees])
        return np.cumsum(per_tree, axis=0) / np.arange(1, len(self.trees) + 1)[:, None]

    def truncated(self, n_estimators: int, max_depth: int) -> "ForestModel":
        trees = tuple(t.truncated(max_depth) for t in self.trees[:n_estimators])
        return ForestModel(trees, self.n_features, max_depth, self.feature_subsample_size, self.seed)

    def to_dict(self) -> dict:
        return {"n_features": self.n_features, "max_depth": self.max_depth,
                "feature_subsample_size": self.feature_subsample_size, "seed": self.seed,
                "trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_dict(cls, d: dict) -> "ForestModel":
        return cls(tuple(Tree.from_dict(t) for t in d["trees"]), int(d["n_features"]), int(d["max_depth"]),
                   int(d["feature_subsample_size"]), int(d["seed"]))


def train_forest(X, y, class_weights: ClassWeights | None = None, n_estimators: int = 100,
                 max_depth: int = 5, feature_subsample: int | None = None, seed: int = 0,
                 min_gain: float = 1e-12) -> ForestModel:
    """Each tree sees a bootstrap sample (multiplicity x class weight as sample
    weight) and picks every split among ``feature_subsample`` random features
    (default ceil(sqrt(n_features)))."""
    X, y = check_xy(X, y)
    if n_estimators < 1 or max_depth < 1:
        raise ModelError("n_estimators and max_depth must be >= 1")
    n, p = X.shape
    m = feature_subsample or math.ceil(math.sqrt(p))
    if not 1 <= m <= p:
        raise ModelError("feature_subsample out of range")
    cw = class_weights or ClassWeights.uniform()
    base_w = cw.sample_weights(y)
    order = presort(X)
    trees = []
    for t in range(n_estimators):
        rng = rng_for(seed, "forest", "tree", t)
        counts = np.bincount(rng.integers(0, n, n), minlength=n).astype(float)
        w = counts * base_w
        stats = np.vstack([w * y, w])
        trees.append(grow_tree(X, stats, w, max_depth, GINI, _gini_leaf, min_gain, order=order,
                               max_features=m, rng=rng))
    return ForestModel(tuple(trees), p, max_depth, m, seed)
