"""Grid selection of tree-ensemble size and depth on an inner validation split.

Every grid cell is scored by balanced error (mean of false-negative and
false-positive rates at probability 0.5). The chosen cell is the smallest one,
ordered by (n_estimators, max_depth), whose error is within ``tolerance`` of
the best. The grid is cheap to sweep: a forest grown to the largest depth
contains every shallower forest as a truncation, and boosted prefixes are
scored stage by stage, so each depth is trained only once.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..errors import ModelError
from ..seeding import rng_for
from .boosting import train_boosted
from .forest import train_forest
from .logistic import sigmoid
from .weights import ClassWeights

logger = logging.getLogger(__name__)

N_ESTIMATORS_GRID = (50, 100, 200, 400)
MAX_DEPTH_GRID = (3, 5, 8)


@dataclass(frozen=True)
class GridChoice:
    n_estimators: int
    max_depth: int
    errors: dict  # (n_estimators, max_depth) -> validation balanced error


def balanced_error(prob: np.ndarray, y: np.ndarray, threshold: float = 0.5) -> float:
    y = np.asarray(y)
    pred = np.asarray(prob) >= threshold
    fnr = float(np.mean(~pred[y == 1])) if (y == 1).any() else 0.0
    fpr = float(np.mean(pred[y == 0])) if (y == 0).any() else 0.0
    return 0.5 * (fnr + fpr)


def select_config(errors: dict, tolerance: float = 0.005) -> tuple[int, int]:
    best = min(errors.values())
    return min(k for k, e in errors.items() if e <= best + tolerance)


def inner_split(y: np.ndarray, seed: int, val_fraction: float = 0.25) -> tuple[np.ndarray, np.ndarray]:
    """Stratified (fit, validation) index split of the training rows."""
    rng = rng_for(seed, "tune", "split")
    fit, val = [], []
    for cls in (0, 1):
        idx = np.flatnonzero(np.asarray(y) == cls)
        idx = idx[rng.permutation(len(idx))]
        k = int(round(val_fraction * len(idx)))
        if len(idx) >= 2:
            k = min(max(k, 1), len(idx) - 1)
        val.append(idx[:k])
        fit.append(idx[k:])
    return np.sort(np.concatenate(fit)), np.sort(np.concatenate(val))


def tune_forest(X, y, seed: int, n_grid=N_ESTIMATORS_GRID, depth_grid=MAX_DEPTH_GRID,
                tolerance: float = 0.005, **kwargs) -> GridChoice:
    X, y = np.asarray(X, dtype=float), np.asarray(y)
    fit, val = inner_split(y, seed)
    if (y[fit] == 1).sum() == 0 or (y[val] == 1).sum() == 0:
        raise ModelError("too few positives to tune")
    cw = ClassWeights.balanced(y[fit])
    big = train_forest(X[fit], y[fit], cw, max(n_grid), max(depth_grid), seed=seed, **kwargs)
    errors = {}
    for d in depth_grid:
        staged = big.staged_proba(X[val], max_depth=d)
        for n in n_grid:
            errors[(n, d)] = balanced_error(staged[n - 1], y[val])
    n, d = select_config(errors, tolerance)
    logger.info("forest grid: chose n_estimators=%d max_depth=%d (error %.4f)", n, d, errors[(n, d)])
    return GridChoice(n, d, errors)


def tune_boosted(X, y, seed: int, n_grid=N_ESTIMATORS_GRID, depth_grid=MAX_DEPTH_GRID,
                 tolerance: float = 0.005, **kwargs) -> GridChoice:
    X, y = np.asarray(X, dtype=float), np.asarray(y)
    fit, val = inner_split(y, seed)
    if (y[fit] == 1).sum() == 0 or (y[val] == 1).sum() == 0:
        raise ModelError("too few positives to tune")
    cw = ClassWeights.balanced(y[fit])
    errors = {}
    for d in depth_grid:
        model = train_boosted(X[fit], y[fit], cw, max(n_grid), d, **kwargs)
        staged = model.staged_decision(X[val])
        for n in n_grid:
            errors[(n, d)] = balanced_error(sigmoid(staged[n - 1]), y[val])
    n, d = select_config(errors, tolerance)
    logger.info("boosted grid: chose n_estimators=%d max_depth=%d (error %.4f)", n, d, errors[(n, d)])
    return GridChoice(n, d, errors)
