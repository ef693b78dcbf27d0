"""Day-1 feature matrix: extraction, kNN imputation, z-score normalization."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .clinical import CohortTable, StageSeries, compute_stage_series
from .errors import DataError, ImputationError
from .ingest import DAY, HOUR, IV_FLUIDS, MEDICATION_CATEGORIES, EventStore

logger = logging.getLogger(__name__)

FEATURE_LABS = (
    ("potassium", "mEq/L"), ("phosphate", "mg/dL"), ("creatine_kinase", "U/L"),
    ("glucose", "mg/dL"), ("lactate", "mmol/L"), ("ph", ""), ("wbc", "K/uL"),
    ("chloride", "mEq/L"), ("bilirubin", "mg/dL"), ("platelet", "K/uL"), ("alt", "U/L"),
    ("hemoglobin", "g/dL"),
)
PRIMARY_WINDOW = (0, 24 * HOUR)
BACKFILL_WINDOW = (-12 * HOUR, 48 * HOUR)
DAY1 = (0, DAY)

CONTINUOUS, BINARY, ORDINAL = "continuous", "binary", "ordinal"


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str
    unit: str = ""


@dataclass(frozen=True)
class FeatureDictionary:
    features: tuple[FeatureSpec, ...]

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise ValueError("feature names must be unique")

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    @property
    def kinds(self) -> list[str]:
        return [f.kind for f in self.features]

    def index(self, name: str) -> int:
        return self.names.index(name)

    def __len__(self) -> int:
        return len(self.features)

    def digest(self) -> str:
        payload = json.dumps([[f.name, f.kind, f.unit] for f in self.features])
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def to_json(self) -> list:
        return [{"name": f.name, "kind": f.kind, "unit": f.unit} for f in self.features]

    @classmethod
    def from_json(cls, data: list) -> "FeatureDictionary":
        return cls(tuple(FeatureSpec(d["name"], d["kind"], d.get("unit", "")) for d in data))


def feature_dictionary(include_aki_stage: bool = True) -> FeatureDictionary:
    specs = [FeatureSpec("age", CONTINUOUS, "years"), FeatureSpec("sex", BINARY, "male=1")]
    specs += [FeatureSpec(name, CONTINUOUS, unit) for name, unit in FEATURE_LABS]
    if include_aki_stage:
        specs.append(FeatureSpec("aki_stage_day1", ORDINAL, "KDIGO 0-3"))
    specs.append(FeatureSpec("fluid_balance_24h", CONTINUOUS, "mL"))
    specs += [FeatureSpec(f"iv_{name}_yn", BINARY) for name in IV_FLUIDS]
    specs += [FeatureSpec(col, BINARY) for _, col in MEDICATION_CATEGORIES]
    return FeatureDictionary(tuple(specs))


def ids_digest(ids: Iterable[str]) -> str:
    """Order-independent fingerprint of a set of patient ids."""
    return hashlib.sha256("\n".join(sorted(ids)).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class NormalizationParams:
    mean: dict[str, float]
    sd: dict[str, float]
    fitted_on: str  # ids_digest of the training rows

    def to_json(self) -> dict:
        return {"mean": self.mean, "sd": self.sd, "fitted_on": self.fitted_on}

    @classmethod
    def from_json(cls, d: dict) -> "NormalizationParams":
        return cls(dict(d["mean"]), dict(d["sd"]), d["fitted_on"])


@dataclass
class FeatureMatrix:
    patient_ids: list[str]
    values: np.ndarray          # n_patients x n_features, NaN where missing
    mask: np.ndarray            # True where the raw value was missing
    dictionary: FeatureDictionary
    normalization: NormalizationParams | None = None
    imputed_with: str | None = None  # ids_digest of the imputation neighbour pool
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n, p = self.values.shape
        if len(self.patient_ids) != n or p != len(self.dictionary) or self.mask.shape != (n, p):
            raise ValueError("FeatureMatrix shape mismatch")

    @property
    def complete(self) -> bool:
        return not np.isnan(self.values).any()

    def rows(self, idx) -> "FeatureMatrix":
        idx = np.asarray(idx, dtype=int)
        return replace(self, patient_ids=[self.patient_ids[i] for i in idx],
                       values=self.values[idx], mask=self.mask[idx])

    def drop(self, name: str) -> "FeatureMatrix":
        j = self.dictionary.index(name)
        keep = [i for i in range(len(self.dictionary)) if i != j]
        d = FeatureDictionary(tuple(self.dictionary.features[i] for i in keep))
        norm = self.normalization
        if norm is not None and name in norm.mean:
            norm = NormalizationParams({k: v for k, v in norm.mean.items() if k != name},
                                       {k: v for k, v in norm.sd.items() if k != name}, norm.fitted_on)
        return replace(self, values=self.values[:, keep], mask=self.mask[:, keep], dictionary=d,
                       normalization=norm)


# --------------------------------------------------------------------------- extraction

def closest_to_admission(series: Sequence[tuple[int, float]], admit: int) -> float | None:
    """Value nearest admission inside [admit, admit+24h], else inside
    [admit-12h, admit+48h]; ties go to the earlier measurement."""
    for lo, hi in (PRIMARY_WINDOW, BACKFILL_WINDOW):
        best = None
        for t, v in series:
            if admit + lo <= t <= admit + hi:
                key = (abs(t - admit), t)
                if best is None or key < best[0]:
                    best = (key, v)
        if best is not None:
            return best[1]
    return None


def extract_raw_features(store: EventStore, cohort: CohortTable, include_aki_stage: bool = True,
                         stage_cache: dict[str, StageSeries] | None = None) -> FeatureMatrix:
    """Raw day-1 features for every included cohort row (NaN = missing)."""
    fd = feature_dictionary(include_aki_stage)
    ids = cohort.included_ids
    X = np.full((len(ids), len(fd)), np.nan)
    col = {name: j for j, name in enumerate(fd.names)}
    med_cols = [(tok, col[c]) for tok, c in MEDICATION_CATEGORIES] + [(f, col[f"iv_{f}_yn"]) for f in IV_FLUIDS]
    for i, pid in enumerate(ids):
        p = store.patients[pid]
        ev = store.events(pid)
        admit = p.icu_admit_time
        X[i, col["age"]] = p.age
        X[i, col["sex"]] = 1.0 if p.sex == "male" else 0.0
        for name, _ in FEATURE_LABS:
            v = closest_to_admission(ev.lab_series(name), admit)
            if v is not None:
                X[i, col[name]] = v
        day1 = [f for f in ev.fluids if admit <= f.time < admit + DAY]
        if day1:
            X[i, col["fluid_balance_24h"]] = (sum(f.volume_ml for f in day1 if f.direction == "intake")
                                              - sum(f.volume_ml for f in day1 if f.direction == "output"))
        for tok, j in med_cols:
            X[i, j] = float(any(admit <= t < admit + DAY for t in ev.med_times(tok)))
        if include_aki_stage:
            if stage_cache is not None and pid in stage_cache:
                series = stage_cache[pid]
            else:
                series = compute_stage_series(store, pid)
                if stage_cache is not None:
                    stage_cache[pid] = series
            X[i, col["aki_stage_day1"]] = series.max_over(admit, admit + DAY)
    mask = np.isnan(X)
    logger.info("extracted %d x %d features; %.1f%% cells missing", X.shape[0], X.shape[1],
                100.0 * mask.mean() if mask.size else 0.0)
    return FeatureMatrix(ids, X, mask, fd)


# --------------------------------------------------------------------------- imputation

def _continuous_cols(fd: FeatureDictionary) -> np.ndarray:
    return np.array([j for j, k in enumerate(fd.kinds) if k == CONTINUOUS], dtype=int)


def knn_distances(Z_rows: np.ndarray, Z_pool: np.ndarray) -> np.ndarray:
    """Euclidean distance over mutually observed dims, rescaled by total/used dims.

    Pairs sharing no observed dimension get +inf.
    """
    n_dims = Z_rows.shape[1]
    diff = Z_rows[:, None, :] - Z_pool[None, :, :]
    present = ~np.isnan(diff)
    used = present.sum(axis=2)
    sq = np.where(present, diff, 0.0)
    sq = np.einsum("ijk,ijk->ij", sq, sq)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.sqrt(sq * n_dims / used)
    d[used == 0] = np.inf
    return d


def impute_knn(matrix: FeatureMatrix, train_idx: Sequence[int], k: int = 3,
               chunk: int = 128) -> FeatureMatrix:
    """Fill every missing cell with the mean of its k nearest training rows.

    Distances use continuous features standardized with training statistics.
    Neighbours come from the training rows only (a training row never uses
    itself); ties at equal distance go to the lower row index. A cell with no
    reachable neighbour falls back to the training mean of that feature.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    X = matrix.values
    train_idx = np.asarray(sorted(set(int(i) for i in train_idx)), dtype=int)
    if train_idx.size == 0:
        raise ImputationError("no training rows to impute from")
    missing = np.isnan(X)
    out = X.copy()
    if not missing.any():
        return replace(matrix, values=out, imputed_with=ids_digest(matrix.patient_ids[i] for i in train_idx))

    Xt = X[train_idx]
    obs_t = ~np.isnan(Xt)
    col_obs = obs_t.sum(axis=0)
    with np.errstate(invalid="ignore"):
        train_mean = np.where(col_obs > 0, np.nansum(Xt, axis=0) / np.maximum(col_obs, 1), np.nan)
    for j in np.flatnonzero(missing.any(axis=0)):
        if col_obs[j] == 0:
            raise ImputationError(f"feature {matrix.dictionary.names[j]!r} has no observed training value")

    cont = _continuous_cols(matrix.dictionary)
    mu = train_mean[cont]
    sd = np.array([np.nanstd(Xt[:, j]) if col_obs[j] > 1 else 1.0 for j in cont])
    sd[~(sd > 0)] = 1.0
    Z_pool = (Xt[:, cont] - mu) / sd
    pos_in_train = {int(r): p for p, r in enumerate(train_idx)}

    rows = np.flatnonzero(missing.any(axis=1))
    for start in range(0, rows.size, chunk):
        block = rows[start:start + chunk]
        D = knn_distances((X[block][:, cont] - mu) / sd, Z_pool)
        for b, i in enumerate(block):
            d = D[b]
            self_pos = pos_in_train.get(int(i))
            if self_pos is not None:
                d = d.copy()
                d[self_pos] = np.inf
                reachable = np.isfinite(d)
                reachable[self_pos] = False
            else:
                reachable = np.isfinite(d)
            order = np.argsort(d, kind="stable")
            order = order[reachable[order]]
            for j in np.flatnonzero(missing[i]):
                cand = order[obs_t[order, j]][:k]
                out[i, j] = Xt[cand, j].mean() if cand.size else train_mean[j]
    return replace(matrix, values=out,
                   imputed_with=ids_digest(matrix.patient_ids[i] for i in train_idx))


# --------------------------------------------------------------------------- normalization

def fit_normalization(matrix: FeatureMatrix, train_idx: Sequence[int]) -> NormalizationParams:
    train_idx = np.asarray(sorted(set(int(i) for i in train_idx)), dtype=int)
    if np.isnan(matrix.values[train_idx]).any():
        raise DataError("normalize requires a complete (imputed) matrix")
    mean, sd = {}, {}
    for j, spec in enumerate(matrix.dictionary.features):
        if spec.kind != CONTINUOUS:
            continue
        col = matrix.values[train_idx, j]
        m, s = float(col.mean()), float(col.std())
        if not s > 0:
            logger.warning("feature %s has zero training variance; passed through with sd=1", spec.name)
            s = 1.0
        mean[spec.name], sd[spec.name] = m, s
    return NormalizationParams(mean, sd, ids_digest(matrix.patient_ids[i] for i in train_idx))


def apply_normalization(matrix: FeatureMatrix, params: NormalizationParams) -> FeatureMatrix:
    out = matrix.values.copy()
    for j, name in enumerate(matrix.dictionary.names):
        if name in params.mean:
            out[:, j] = (out[:, j] - params.mean[name]) / params.sd[name]
    return replace(matrix, values=out, normalization=params)


def normalize(matrix: FeatureMatrix, train_idx: Sequence[int]) -> FeatureMatrix:
    """z-score continuous features with training mean/sd; binary and ordinal pass through."""
    return apply_normalization(matrix, fit_normalization(matrix, train_idx))


# --------------------------------------------------------------------------- persistence

def write_feature_matrix(matrix: FeatureMatrix, csv_path: str | os.PathLike,
                         config_hash: str = "", extra: dict | None = None) -> None:
    """CSV (patient_id + features in dictionary order) plus ``<csv>.json`` sidecar."""
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id"] + matrix.dictionary.names)
        for pid, row in zip(matrix.patient_ids, matrix.values):
            w.writerow([pid] + ["" if np.isnan(v) else repr(float(v)) for v in row])
    sidecar = {
        "config_hash": config_hash,
        "feature_dictionary": matrix.dictionary.to_json(),
        "dictionary_digest": matrix.dictionary.digest(),
        "missing_counts": {n: int(c) for n, c in zip(matrix.dictionary.names, matrix.mask.sum(axis=0))},
        "missing_mask": [[int(j) for j in np.flatnonzero(r)] for r in matrix.mask],
        "normalization": matrix.normalization.to_json() if matrix.normalization else None,
        "imputed_with": matrix.imputed_with,
        **(extra or {}),
    }
    with open(str(csv_path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=1, sort_keys=True)


def read_feature_matrix(csv_path: str | os.PathLike) -> tuple[FeatureMatrix, dict]:
    with open(str(csv_path) + ".json", encoding="utf-8") as fh:
        sidecar = json.load(fh)
    fd = FeatureDictionary.from_json(sidecar["feature_dictionary"])
    ids, rows = [], []
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(row for row in fh if not row.startswith("#"))
        header = next(reader)
        if header[1:] != fd.names:
            raise DataError(f"{csv_path}: header does not match the feature dictionary")
        for row in reader:
            ids.append(row[0])
            rows.append([float(v) if v != "" else np.nan for v in row[1:]])
    X = np.array(rows, dtype=float).reshape(len(ids), len(fd))
    mask = np.zeros_like(X, dtype=bool)
    for i, cols in enumerate(sidecar.get("missing_mask", [])):
        mask[i, cols] = True
    norm = NormalizationParams.from_json(sidecar["normalization"]) if sidecar.get("normalization") else None
    return FeatureMatrix(ids, X, mask, fd, norm, sidecar.get("imputed_with")), sidecar
