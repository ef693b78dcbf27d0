"""Second-order gradient-boosted trees for class-weighted logistic loss."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..errors import ModelError, NumericError
from .logistic import sigmoid
from .tree import NEWTON, Tree, grow_tree, presort
from .weights import ClassWeights, as_matrix, check_xy

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class BoostedModel:
    trees: tuple[Tree, ...]
    n_features: int
    base_score: float
    learning_rate: float
    max_depth: int
    l2_leaf_lambda: float
    trace: tuple[float, ...] = ()

    kind = "boosted"

    @property
    def n_estimators(self) -> int:
        return len(self.trees)

    def decision_function(self, X, n_estimators: int | None = None) -> np.ndarray:
        X = as_matrix(X, self.n_features)
        z = np.full(X.shape[0], self.base_score)
        for t in self.trees[:n_estimators] if n_estimators is not None else self.trees:
            z += self.learning_rate * t.predict(X)
        return z

    def predict_proba(self, X, n_estimators: int | None = None) -> np.ndarray:
        return sigmoid(self.decision_function(X, n_estimators))

    def staged_decision(self, X) -> np.ndarray:
        """Margins after 1..n trees (n_trees x n_rows)."""
        X = as_matrix(X, self.n_features)
        steps = np.array([self.learning_rate * t.predict(X) for t in self.trees]).reshape(len(self.trees), -1)
        return self.base_score + np.cumsum(steps, axis=0)

    def truncated(self, n_estimators: int) -> "BoostedModel":
        return BoostedModel(self.trees[:n_estimators], self.n_features, self.base_score, self.learning_rate,
                            self.max_depth, self.l2_leaf_lambda, self.trace[:n_estimators + 1])

    def to_dict(self) -> dict:
        return {"n_features": self.n_features, "base_score": self.base_score,
                "learning_rate": self.learning_rate, "max_depth": self.max_depth,
                "l2_leaf_lambda": self.l2_leaf_lambda, "trace": list(self.trace),
                "trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_dict(cls, d: dict) -> "BoostedModel":
        return cls(tuple(Tree.from_dict(t) for t in d["trees"]), int(d["n_features"]), float(d["base_score"]),
                   float(d["learning_rate"]), int(d["max_depth"]), float(d["l2_leaf_lambda"]),
                   tuple(d.get("trace", ())))


def split_gain(L, R, T, lam: float):
    """0.5 * [GL^2/(HL+lam) + GR^2/(HR+lam) - G^2/(H+lam)]; stats rows are (g, h)."""
    return 0.5 * (L[0] ** 2 / (L[1] + lam) + R[0] ** 2 / (R[1] + lam) - T[0] ** 2 / (T[1] + lam))


def leaf_value(G, H, lam: float):
    return -G / (H + lam)


def weighted_log_loss(margin: np.ndarray, y: np.ndarray, sw: np.ndarray) -> float:
    return float(np.dot(sw, np.logaddexp(0.0, margin) - y * margin) / sw.sum())


def train_boosted(X, y, class_weights: ClassWeights | None = None, n_estimators: int = 100,
                  max_depth: int = 3, learning_rate: float = 0.1, l2_leaf_lambda: float = 1.0,
                  min_child_weight: float = 1.0, min_gain: float = 1e-10) -> BoostedModel:
    X, y = check_xy(X, y)
    if not 0.0 < learning_rate <= 1.0:
        raise ModelError("learning_rate must lie in (0, 1]")
    if n_estimators < 0 or max_depth < 1 or l2_leaf_lambda < 0:
        raise ModelError("bad boosting hyperparameters")
    cw = class_weights or ClassWeights.uniform()
    sw = cw.sample_weights(y)
    pos, neg = sw[y == 1].sum(), sw[y == 0].sum()
    if pos == 0 or neg == 0:
        raise ModelError("boosting needs both classes")
    base = float(np.log(pos / neg))
    lam = l2_leaf_lambda
    margin = np.full(len(y), base)
    order = presort(X)
    trees = []
    trace = [weighted_log_loss(margin, y, sw)]

    def leaf_fn(S):
        return leaf_value(S[0], S[1], lam)

    for stage in range(n_estimators):
        p = sigmoid(margin)
        g = sw * (p - y)
        h = sw * p * (1.0 - p)
        if not (np.isfinite(g).all() and np.isfinite(h).all()):
            raise NumericError(f"non-finite gradient at boosting stage {stage}")
        tree = grow_tree(X, np.vstack([g, h]), sw, max_depth, NEWTON, leaf_fn, min_gain, lam=lam,
                         min_child=min_child_weight, order=order)
        margin = margin + learning_rate * tree.predict(X)
        trees.append(tree)
        trace.append(weighted_log_loss(margin, y, sw))
    logger.debug("boosted %d trees, final weighted loss %.5f", len(trees), trace[-1])
    return BoostedModel(tuple(trees), X.shape[1], base, float(learning_rate), int(max_depth), float(lam),
                        tuple(trace))
