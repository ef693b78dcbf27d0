"""From-scratch classifiers sharing one scoring surface and one JSON format."""

from __future__ import annotations

import json
import os

import numpy as np

from ..errors import ModelError
from .boosting import BoostedModel, train_boosted
from .forest import ForestModel, train_forest
from .logistic import LogisticModel, sigmoid, train_logistic
from .tree import Tree, grow_tree, presort
from .weights import ClassWeights

FORMAT_VERSION = 1
MODEL_KINDS = ("logistic", "forest", "boosted")
_CLASSES = {"logistic": LogisticModel, "forest": ForestModel, "boosted": BoostedModel}

Model = LogisticModel | ForestModel | BoostedModel

__all__ = [
    "BoostedModel", "ClassWeights", "ForestModel", "LogisticModel", "MODEL_KINDS", "Model", "Tree",
    "grow_tree", "load_model", "model_from_dict", "model_to_dict", "predict_proba", "presort", "save_model",
    "sigmoid", "train_boosted", "train_forest", "train_logistic",
]


def predict_proba(model: Model, X) -> np.ndarray:
    """Probability of the positive class for each row of X."""
    out = model.predict_proba(X)
    if out.size and not (np.isfinite(out).all() and out.min() >= 0.0 and out.max() <= 1.0):
        raise ModelError("model produced probabilities outside [0, 1]")
    return out


def model_to_dict(model: Model, meta: dict | None = None) -> dict:
    return {"format_version": FORMAT_VERSION, "kind": model.kind, "meta": meta or {}, "model": model.to_dict()}


def model_from_dict(d: dict) -> tuple[Model, dict]:
    if d.get("format_version") != FORMAT_VERSION:
        raise ModelError(f"unsupported model format version {d.get('format_version')!r}")
    kind = d.get("kind")
    if kind not in _CLASSES:
        raise ModelError(f"unknown model kind {kind!r}")
    return _CLASSES[kind].from_dict(d["model"]), dict(d.get("meta", {}))


def save_model(model: Model, path: str | os.PathLike, meta: dict | None = None) -> None:
    """JSON with shortest-repr floats, so loading restores every value exactly."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model, meta), fh, sort_keys=True)


def load_model(path: str | os.PathLike) -> tuple[Model, dict]:
    with open(path, encoding="utf-8") as fh:
        try:
            return model_from_dict(json.load(fh))
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelError(f"{path}: malformed model file ({exc})") from exc
