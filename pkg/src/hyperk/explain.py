"""Shapley attributions for the three model kinds.

Tree ensembles use the exact path-dependent algorithm: the value of a feature
coalition S is the model output when features in S follow x down the tree and
the others split the flow between both children in proportion to training
cover. ``shap_brute_force`` computes the same quantity by enumerating all
coalitions and exists to verify the fast path.

Forests are explained in probability space (their leaves hold probabilities),
boosted ensembles and logistic regression in log-odds.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass
from itertools import combinations
from typing import Sequence

import numpy as np

from .errors import ModelError
from .models import BoostedModel, ForestModel, LogisticModel, Tree

logger = logging.getLogger(__name__)

LOG_ODDS, PROBABILITY = "log_odds", "probability"
MAX_BRUTE_FORCE_FEATURES = 15


@dataclass(frozen=True, eq=False)
class Attribution:
    patient_id: str
    base_value: float
    phi: np.ndarray
    output_space: str

    def total(self) -> float:
        return self.base_value + float(self.phi.sum())


@dataclass(frozen=True, eq=False)
class AttributionSet:
    """Attributions for many rows of one model; ``phi`` is n_rows x n_features."""

    patient_ids: list[str]
    base_value: float
    phi: np.ndarray
    output_space: str
    feature_names: list[str]
    values: np.ndarray | None = None  # the explained feature rows

    def __len__(self) -> int:
        return len(self.patient_ids)

    def __getitem__(self, i: int) -> Attribution:
        return Attribution(self.patient_ids[i], self.base_value, self.phi[i], self.output_space)

    def totals(self) -> np.ndarray:
        return self.base_value + self.phi.sum(axis=1)


def model_margin(model, X) -> np.ndarray:
    """Model output in the space its attributions live in."""
    if isinstance(model, ForestModel):
        return model.predict_proba(X)
    if isinstance(model, (BoostedModel, LogisticModel)):
        return model.decision_function(X)
    raise ModelError(f"cannot explain {type(model).__name__}")


def output_space(model) -> str:
    return PROBABILITY if isinstance(model, ForestModel) else LOG_ODDS


# --------------------------------------------------------------------------- linear

def shap_linear(model: LogisticModel, X, background_means=None) -> tuple[float, np.ndarray]:
    """phi_j = w_j (x_j - mean_j); base value w . mean + b."""
    mu = model.background_means if background_means is None else np.asarray(background_means, dtype=float)
    if mu is None:
        raise ModelError("shap_linear needs background means")
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    X2 = np.atleast_2d(X)
    if X2.shape[1] != model.n_features or len(mu) != model.n_features:
        raise ModelError("dimension mismatch between model, x and background means")
    phi = (X2 - mu) * model.weights
    base = float(mu @ model.weights + model.intercept)
    return base, phi[0] if single else phi


# --------------------------------------------------------------------------- trees

def expected_value(tree: Tree) -> float:
    """Cover-weighted mean leaf value."""
    leaves = tree.left < 0
    return float(np.dot(tree.cover[leaves], tree.value[leaves]) / tree.cover[0])


def _check_covers(tree: Tree) -> None:
    if tree.cover is None or len(tree.cover) != tree.n_nodes or not (tree.cover > 0).all():
        raise ModelError("tree is missing positive cover statistics")


class _Path:
    """Unique-feature path of the recursion; ``o`` and ``w`` are per-row vectors."""

    __slots__ = ("d", "z", "o", "w")

    def __init__(self, d, z, o, w):
        self.d, self.z, self.o, self.w = d, z, o, w

    def copy(self) -> "_Path":
        return _Path(list(self.d), list(self.z), list(self.o), [w.copy() for w in self.w])

    def extend(self, pz: float, po: np.ndarray, pi: int) -> None:
        l = len(self.d)
        self.d.append(pi)
        self.z.append(pz)
        self.o.append(po)
        self.w.append(np.ones_like(po) if l == 0 else np.zeros_like(po))
        for i in range(l - 1, -1, -1):
            self.w[i + 1] = self.w[i + 1] + po * self.w[i] * ((i + 1) / (l + 1))
            self.w[i] = pz * self.w[i] * ((l - i) / (l + 1))

    def unwind(self, i: int) -> None:
        l = len(self.d) - 1
        o, z = self.o[i], self.z[i]
        hot = o != 0
        o_safe = np.where(hot, o, 1.0)
        n = self.w[l]
        for j in range(l - 1, -1, -1):
            w_hot = n * (l + 1) / ((j + 1) * o_safe)
            w_cold = self.w[j] * (l + 1) / (z * (l - j))
            n = np.where(hot, self.w[j] - w_hot * z * ((l - j) / (l + 1)), n)
            self.w[j] = np.where(hot, w_hot, w_cold)
        for lst in (self.d, self.z, self.o):
            del lst[i]
        del self.w[l]

    def unwound_sum(self, i: int) -> np.ndarray:
        l = len(self.d) - 1
        o, z = self.o[i], self.z[i]
        hot = o != 0
        o_safe = np.where(hot, o, 1.0)
        total = np.zeros_like(o)
        n = self.w[l]
        for j in range(l - 1, -1, -1):
            t_hot = n * (l + 1) / ((j + 1) * o_safe)
            t_cold = self.w[j] * (l + 1) / (z * (l - j))
            total = total + np.where(hot, t_hot, t_cold)
            n = np.where(hot, self.w[j] - t_hot * z * ((l - j) / (l + 1)), n)
        return total


def tree_shap(tree: Tree, X: np.ndarray) -> np.ndarray:
    """Exact path-dependent Shapley values of one tree for every row of X."""
    _check_covers(tree)
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    phi = np.zeros((n, p))
    if tree.left[0] < 0 or n == 0:
        return phi

    def recurse(node: int, path: _Path, pz: float, po: np.ndarray, pi: int) -> None:
        path = path.copy()
        path.extend(pz, po, pi)
        if tree.left[node] < 0:
            v = tree.value[node]
            for i in range(1, len(path.d)):
                phi[:, path.d[i]] += path.unwound_sum(i) * (path.o[i] - path.z[i]) * v
            return
        f = int(tree.feature[node])
        go_left = X[:, f] <= tree.threshold[node]
        iz, io = 1.0, np.ones(n)
        for k in range(1, len(path.d)):
            if path.d[k] == f:
                iz, io = path.z[k], path.o[k]
                path.unwind(k)
                break
        left, right = int(tree.left[node]), int(tree.right[node])
        cover = tree.cover[node]
        recurse(left, path, iz * tree.cover[left] / cover, io * go_left, f)
        recurse(right, path, iz * tree.cover[right] / cover, io * ~go_left, f)

    recurse(0, _Path([], [], [], []), 1.0, np.ones(n), -1)
    return phi


def shap_tree(model, X) -> tuple[float, np.ndarray]:
    """(base value, phi) for a forest (probability) or boosted model (log-odds).

    phi of the ensemble is the mean (forest) or learning-rate-scaled sum
    (boosted) of per-tree phi.
    """
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    X2 = np.atleast_2d(X)
    if X2.shape[1] != model.n_features:
        raise ModelError("dimension mismatch between model and x")
    if isinstance(model, ForestModel):
        trees, scale, offset = model.trees, 1.0 / len(model.trees), 0.0
    elif isinstance(model, BoostedModel):
        trees, scale, offset = model.trees, model.learning_rate, model.base_score
    else:
        raise ModelError(f"shap_tree does not handle {type(model).__name__}")
    phi = np.zeros(X2.shape)
    base = offset
    for t in trees:
        phi += scale * tree_shap(t, X2)
        base += scale * expected_value(t)
    return base, phi[0] if single else phi


def cover_descent(tree: Tree, x: np.ndarray, known: Sequence[bool]) -> float:
    """E[tree(x) | features in ``known``] by cover-weighted descent."""
    def go(node: int) -> float:
        if tree.left[node] < 0:
            return float(tree.value[node])
        f = int(tree.feature[node])
        left, right = int(tree.left[node]), int(tree.right[node])
        if known[f]:
            return go(left if x[f] <= tree.threshold[node] else right)
        return (tree.cover[left] * go(left) + tree.cover[right] * go(right)) / tree.cover[node]
    return go(0)


def ensemble_conditional(model, x: np.ndarray, known: Sequence[bool]) -> float:
    if isinstance(model, ForestModel):
        return float(np.mean([cover_descent(t, x, known) for t in model.trees]))
    if isinstance(model, BoostedModel):
        return model.base_score + model.learning_rate * sum(cover_descent(t, x, known) for t in model.trees)
    raise ModelError(f"no cover-descent conditioner for {type(model).__name__}")


def shap_brute_force(model, x, conditioner=ensemble_conditional) -> tuple[float, np.ndarray]:
    """Shapley values by enumerating all 2^M coalitions."""
    x = np.asarray(x, dtype=float)
    m = len(x)
    if m > MAX_BRUTE_FORCE_FEATURES:
        raise ModelError(f"brute-force Shapley refuses {m} > {MAX_BRUTE_FORCE_FEATURES} features")
    value = {}
    for size in range(m + 1):
        for subset in combinations(range(m), size):
            known = np.zeros(m, dtype=bool)
            known[list(subset)] = True
            value[subset] = conditioner(model, x, known)
    phi = np.zeros(m)
    for j in range(m):
        others = [k for k in range(m) if k != j]
        for size in range(m):
            weight = math.factorial(size) * math.factorial(m - size - 1) / math.factorial(m)
            for subset in combinations(others, size):
                with_j = tuple(sorted(subset + (j,)))
                phi[j] += weight * (value[with_j] - value[subset])
    return value[()], phi


# --------------------------------------------------------------------------- dispatch

def explain(model, X, patient_ids: Sequence[str], feature_names: Sequence[str],
            background_means=None) -> AttributionSet:
    X = np.asarray(X, dtype=float)
    if isinstance(model, LogisticModel):
        base, phi = shap_linear(model, X, background_means)
    else:
        base, phi = shap_tree(model, X)
    attrs = AttributionSet(list(patient_ids), float(base), np.atleast_2d(phi), output_space(model),
                           list(feature_names), X)
    gap = np.abs(attrs.totals() - model_margin(model, X)).max() if len(X) else 0.0
    if gap > 1e-6:
        raise ModelError(f"local accuracy violated by {gap:.3g}")
    return attrs


# --------------------------------------------------------------------------- summaries

@dataclass(frozen=True)
class RankedFeature:
    name: str
    mean_abs_phi: float
    mean_phi: float
    value_correlation: float  # Pearson r between feature value and phi; nan if undefined


@dataclass(frozen=True)
class SummaryRanking:
    features: tuple[RankedFeature, ...]
    output_space: str
    n_rows: int

    def top(self, k: int) -> list[RankedFeature]:
        return list(self.features[:k])

    def names(self, k: int | None = None) -> list[str]:
        return [f.name for f in self.features[:k]]


def _corr(a: np.ndarray, b: np.ndarray) -> float:
    if len(a) < 2 or a.std() == 0 or b.std() == 0:
        return float("nan")
    return float(np.corrcoef(a, b)[0, 1])


def summarize(attrs: AttributionSet) -> SummaryRanking:
    """Features ranked by mean |phi| (descending; ties keep dictionary order)."""
    if len(attrs) == 0:
        raise ModelError("summarize needs at least one attribution")
    mean_abs = np.abs(attrs.phi).mean(axis=0)
    mean = attrs.phi.mean(axis=0)
    order = sorted(range(len(mean_abs)), key=lambda j: (-mean_abs[j], j))
    ranked = []
    for j in order:
        corr = _corr(attrs.values[:, j], attrs.phi[:, j]) if attrs.values is not None else float("nan")
        ranked.append(RankedFeature(attrs.feature_names[j], float(mean_abs[j]), float(mean[j]), corr))
    return SummaryRanking(tuple(ranked), attrs.output_space, len(attrs))


def write_phi_csv(attrs: AttributionSet, path: str | os.PathLike, header_comment: str | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "base_value", "output_space"] + attrs.feature_names)
        for pid, row in zip(attrs.patient_ids, attrs.phi):
            w.writerow([pid, repr(attrs.base_value), attrs.output_space] + [repr(float(v)) for v in row])


def write_summary(ranking: SummaryRanking, csv_path: str | os.PathLike, json_path: str | os.PathLike | None = None,
                  top_k: int | None = None, header_comment: str | None = None, meta: dict | None = None) -> None:
    rows = ranking.top(top_k) if top_k else list(ranking.features)
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "feature", "mean_abs_phi", "mean_phi", "value_correlation"])
        for i, f in enumerate(rows, 1):
            w.writerow([i, f.name, repr(f.mean_abs_phi), repr(f.mean_phi), repr(f.value_correlation)])
    if json_path is not None:
        payload = {"output_space": ranking.output_space, "n_rows": ranking.n_rows, **(meta or {}),
                   "features": [{"feature": f.name, "mean_abs_phi": f.mean_abs_phi, "mean_phi": f.mean_phi,
                                 "value_correlation": None if math.isnan(f.value_correlation)
                                 else f.value_correlation} for f in rows]}
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
