from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ModelError


@dataclass(frozen=True)
class ClassWeights:
    """Per-class sample weights; ``balanced`` gives ``n_total / (2 * n_class)``."""

    weight_pos: float = 1.0
    weight_neg: float = 1.0

    def __post_init__(self):
        if not (self.weight_pos > 0 and self.weight_neg > 0):
            raise ModelError("class weights must be positive")

    @classmethod
    def balanced(cls, y) -> "ClassWeights":
        y = np.asarray(y)
        n, n_pos = len(y), int((y == 1).sum())
        if n_pos == 0 or n_pos == n:
            raise ModelError("balanced class weights need both classes")
        return cls(n / (2.0 * n_pos), n / (2.0 * (n - n_pos)))

    @classmethod
    def uniform(cls) -> "ClassWeights":
        return cls(1.0, 1.0)

    def sample_weights(self, y) -> np.ndarray:
        return np.where(np.asarray(y) == 1, self.weight_pos, self.weight_neg).astype(float)


def check_xy(X, y) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise ModelError(f"X {X.shape} and y {y.shape} do not align")
    if X.shape[0] == 0:
        raise ModelError("empty training set")
    if not np.isfinite(X).all():
        raise ModelError("X must be complete and finite (impute before training)")
    if not np.isin(y, (0, 1)).all():
        raise ModelError("labels must be 0/1")
    return X, y.astype(float)


def as_matrix(X, n_features: int) -> np.ndarray:
    """Scoring input as a 2-D float array; empty input gives a 0-row matrix."""
    X = np.asarray(X, dtype=float)
    if X.size == 0:
        return np.zeros((0, n_features))
    if X.ndim != 2 or X.shape[1] != n_features:
        raise ModelError(f"expected {n_features} feature columns, got shape {X.shape}")
    return X
