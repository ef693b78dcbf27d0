"""Class-weighted L2-regularized logistic regression, full-batch gradient descent."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..errors import ModelError, NumericError
from .weights import ClassWeights, as_matrix, check_xy

logger = logging.getLogger(__name__)


def sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -np.asarray(z, dtype=float)))


@dataclass(frozen=True, eq=False)
class LogisticModel:
    weights: np.ndarray
    intercept: float
    l2_lambda: float
    trace: tuple[float, ...] = ()
    background_means: np.ndarray | None = field(default=None)

    kind = "logistic"

    @property
    def n_features(self) -> int:
        return len(self.weights)

    def decision_function(self, X) -> np.ndarray:
        return as_matrix(X, self.n_features) @ self.weights + self.intercept

    def predict_proba(self, X) -> np.ndarray:
        return sigmoid(self.decision_function(X))

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "intercept": self.intercept, "l2_lambda": self.l2_lambda,
                "trace": list(self.trace),
                "background_means": None if self.background_means is None else self.background_means.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "LogisticModel":
        bg = d.get("background_means")
        return cls(np.asarray(d["weights"], dtype=float), float(d["intercept"]), float(d["l2_lambda"]),
                   tuple(d.get("trace", ())), None if bg is None else np.asarray(bg, dtype=float))


def logistic_loss(theta: np.ndarray, X: np.ndarray, y: np.ndarray, sw: np.ndarray, l2: float) -> float:
    """Mean weighted negative log-likelihood + (l2/2)|w|^2; theta = (w, b)."""
    with np.errstate(over="ignore", invalid="ignore"):
        z = X @ theta[:-1] + theta[-1]
        nll = np.logaddexp(0.0, z) - y * z
        return float(np.dot(sw, nll) / len(y) + 0.5 * l2 * np.dot(theta[:-1], theta[:-1]))


def logistic_gradient(theta: np.ndarray, X: np.ndarray, y: np.ndarray, sw: np.ndarray, l2: float) -> np.ndarray:
    with np.errstate(over="ignore", invalid="ignore"):
        z = X @ theta[:-1] + theta[-1]
    r = sw * (sigmoid(z) - y) / len(y)
    g = np.empty_like(theta)
    g[:-1] = X.T @ r + l2 * theta[:-1]
    g[-1] = r.sum()
    return g


def train_logistic(X, y, class_weights: ClassWeights | None = None, l2_lambda: float = 1e-3,
                   lr_schedule: float = 1.0, max_epochs: int = 2000, tol: float = 1e-6) -> LogisticModel:
    """Gradient descent with Armijo backtracking.

    ``lr_schedule`` is the initial step; after an accepted step the trial step
    doubles, after a rejected one it halves. Stops when the gradient norm drops
    below ``tol`` or after ``max_epochs`` accepted steps.
    """
    X, y = check_xy(X, y)
    if l2_lambda < 0 or lr_schedule <= 0:
        raise ModelError("l2_lambda must be >= 0 and lr_schedule > 0")
    cw = class_weights or ClassWeights.uniform()
    sw = cw.sample_weights(y)
    theta = np.zeros(X.shape[1] + 1)
    loss = logistic_loss(theta, X, y, sw, l2_lambda)
    trace = [loss]
    step = lr_schedule
    for epoch in range(1, max_epochs + 1):
        g = logistic_gradient(theta, X, y, sw, l2_lambda)
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient at epoch {epoch}")
        gg = float(np.dot(g, g))
        if np.sqrt(gg) < tol:
            break
        while True:
            cand = theta - step * g
            new = logistic_loss(cand, X, y, sw, l2_lambda)
            if not np.isfinite(new):
                raise NumericError(f"non-finite loss at epoch {epoch}")
            if new <= loss - 0.5 * step * gg:
                break
            step *= 0.5
            if step < 1e-20:
                logger.debug("line search stalled at epoch %d", epoch)
                return _finish(theta, l2_lambda, trace, X)
        theta, loss = cand, new
        trace.append(loss)
        step *= 2.0
    return _finish(theta, l2_lambda, trace, X)


def _finish(theta, l2, trace, X) -> LogisticModel:
    if not np.isfinite(theta).all():
        raise NumericError("non-finite logistic weights")
    return LogisticModel(theta[:-1].copy(), float(theta[-1]), float(l2), tuple(trace), X.mean(axis=0))
