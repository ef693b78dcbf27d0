"""Repeated stratified splits, AUC with intervals, lead-time test subsets.

One evaluation cell is (variant, scenario, repeat): impute and normalize with
the repeat's training rows, train every model kind once on all training
labels, then score each lead-time subset of the test rows. Cells are
independent and can run in a process pool; results are assembled in key order
so the output never depends on scheduling.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .clinical import SCENARIOS, CohortTable, StageSeries, build_cohort
from .config import RunConfig
from .errors import DataError
from .explain import explain, summarize
from .features import FeatureMatrix, extract_raw_features, ids_digest, impute_knn, normalize
from .ingest import EventStore
from .models import (
    MODEL_KINDS,
    ClassWeights,
    model_to_dict,
    predict_proba,
    train_boosted,
    train_forest,
    train_logistic,
)
from .models.tuning import tune_boosted, tune_forest
from .seeding import derive_seed, rng_for

logger = logging.getLogger(__name__)

MAIN, WITHOUT_AKI = "main", "without_aki_stage"
LABEL_HORIZON_DAYS = 14


# --------------------------------------------------------------------------- splits

@dataclass(frozen=True)
class SplitPlan:
    repeat_index: int
    seed: int
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]


def make_splits(ids: Sequence[str], labels: Sequence[int], n_repeats: int = 4, seed: int = 0,
                train_fraction: float = 0.6) -> list[SplitPlan]:
    """Independent stratified train/test splits with per-repeat derived seeds.

    Each class contributes ``round(train_fraction * n_class)`` rows to the
    training side; both sides keep cohort order.
    """
    ids = list(ids)
    y = np.asarray(labels)
    if len(ids) != len(y) or len(set(ids)) != len(ids):
        raise DataError("ids must be unique and aligned with labels")
    n_pos, n_neg = int((y == 1).sum()), int((y == 0).sum())
    if n_pos < 2 or n_neg < 2:
        raise DataError(f"need at least 2 positives and 2 negatives to split (got {n_pos} and {n_neg})")
    plans = []
    for r in range(n_repeats):
        s = derive_seed(seed, "split", r)
        rng = rng_for(s, "permute")
        train = np.zeros(len(ids), dtype=bool)
        for cls in (1, 0):
            idx = np.flatnonzero(y == cls)
            k = int(round(train_fraction * len(idx)))
            k = min(max(k, 1), len(idx) - 1)
            train[idx[rng.permutation(len(idx))[:k]]] = True
        plans.append(SplitPlan(r, s, tuple(i for i, t in zip(ids, train) if t),
                               tuple(i for i, t in zip(ids, train) if not t)))
    return plans


def lead_subset(labels: Sequence[int], onset_days: Sequence[int | None], start_day: int) -> np.ndarray:
    """Mask keeping every negative and positives with onset day in [start_day, 14]."""
    y = np.asarray(labels)
    keep = y == 0
    for i, (lab, day) in enumerate(zip(y, onset_days)):
        if lab == 1 and day is not None and start_day <= day <= LABEL_HORIZON_DAYS:
            keep[i] = True
    return keep


def lead_window(start_day: int) -> str:
    return f"{start_day}-{LABEL_HORIZON_DAYS}"


# --------------------------------------------------------------------------- AUC and intervals

def _check_binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise DataError("scores and labels must be aligned vectors")
    if not ((y == 1).any() and (y == 0).any()):
        raise DataError("AUC needs at least one positive and one negative")
    return s, y


def auc_roc(scores, labels) -> float:
    """P(score of random positive > random negative), ties counted 1/2 (Mann-Whitney U)."""
    s, y = _check_binary(scores, labels)
    ranks = rankdata(s)
    n_pos = int((y == 1).sum())
    n_neg = len(y) - n_pos
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(fpr, tpr, threshold) at every distinct score, highest threshold first."""
    s, y = _check_binary(scores, labels)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y == 1)[last]
    fp = np.cumsum(y == 0)[last]
    return (np.r_[0.0, fp / fp[-1]], np.r_[0.0, tp / tp[-1]], np.r_[np.inf, s[last]])


def bootstrap_aucs(scores, labels, n_boot: int, rng: np.random.Generator) -> np.ndarray:
    """AUCs of ``n_boot`` stratified resamples (positives and negatives
    resampled separately, with replacement).

    Draws positive indices (n_boot x n_pos) then negative indices
    (n_boot x n_neg); each replicate's AUC comes from resample counts and
    cumulative negative counts, so no replicate is materialized.
    """
    s, y = _check_binary(scores, labels)
    pos, neg = s[y == 1], s[y == 0]
    n_pos, n_neg = len(pos), len(neg)
    pos_idx = rng.integers(0, n_pos, (n_boot, n_pos))
    neg_idx = rng.integers(0, n_neg, (n_boot, n_neg))
    order = np.argsort(neg, kind="stable")
    rank_of = np.empty(n_neg, dtype=np.int64)
    rank_of[order] = np.arange(n_neg)
    neg_sorted = neg[order]
    rows = np.arange(n_boot)[:, None]
    neg_counts = np.bincount((rows * n_neg + rank_of[neg_idx]).ravel(), minlength=n_boot * n_neg)
    cum = np.zeros((n_boot, n_neg + 1))
    cum[:, 1:] = np.cumsum(neg_counts.reshape(n_boot, n_neg), axis=1)
    lo = np.searchsorted(neg_sorted, pos, side="left")
    hi = np.searchsorted(neg_sorted, pos, side="right")
    per_pos = cum[:, lo] + 0.5 * (cum[:, hi] - cum[:, lo])          # n_boot x n_pos
    pos_counts = np.bincount((rows * n_pos + pos_idx).ravel(), minlength=n_boot * n_pos).reshape(n_boot, n_pos)
    return (pos_counts * per_pos).sum(axis=1) / (n_pos * n_neg)


def order_statistic_interval(values: np.ndarray, level: float) -> tuple[float, float]:
    """Percentile interval from order statistics k_lo = ceil(B*a/2) and
    k_hi = floor(B*(1-a/2)) (1-based), a = 1 - level."""
    v = np.sort(np.asarray(values, dtype=float))
    b = len(v)
    a = 1.0 - level
    k_lo = max(1, math.ceil(round(b * a / 2.0, 9)))
    k_hi = min(b, max(k_lo, math.floor(round(b * (1.0 - a / 2.0), 9))))
    return float(v[k_lo - 1]), float(v[k_hi - 1])


@dataclass(frozen=True)
class IntervalEstimate:
    mean: float
    low: float            # reported interval
    high: float
    split_low: float      # percentile interval over per-split AUCs
    split_high: float
    boot_low: float       # bootstrap interval of the mean split AUC
    boot_high: float


def confidence_interval(per_split_aucs: Sequence[float], level: float = 0.95,
                        test_sets: Sequence[tuple[np.ndarray, np.ndarray]] | None = None,
                        n_bootstrap: int = 1000, rng: np.random.Generator | None = None) -> IntervalEstimate:
    """Split-percentile interval plus a stratified bootstrap of every split's
    test set (statistic: mean AUC across splits). The bootstrap interval is
    reported, widened if needed so it always contains the mean."""
    aucs = np.asarray(per_split_aucs, dtype=float)
    if aucs.size < 2:
        raise DataError("confidence_interval needs at least 2 splits")
    mean = float(aucs.mean())
    a = 1.0 - level
    split_low, split_high = (float(v) for v in np.percentile(aucs, [100 * a / 2, 100 * (1 - a / 2)]))
    if test_sets is None:
        return IntervalEstimate(mean, min(split_low, mean), max(split_high, mean), split_low, split_high,
                                float("nan"), float("nan"))
    if len(test_sets) != aucs.size:
        raise DataError("one test set per split is required for the bootstrap")
    rng = rng if rng is not None else np.random.default_rng(0)
    reps = np.mean([bootstrap_aucs(s, y, n_bootstrap, rng) for s, y in test_sets], axis=0)
    boot_low, boot_high = order_statistic_interval(reps, level)
    return IntervalEstimate(mean, min(boot_low, mean), max(boot_high, mean), split_low, split_high,
                            boot_low, boot_high)


# --------------------------------------------------------------------------- result table

@dataclass(frozen=True)
class ResultRow:
    scenario: str
    model_kind: str
    lead_window: str
    auc_mean: float
    ci_low: float
    ci_high: float
    n_test: int
    n_pos: int
    n_splits: int
    split_ci_low: float
    split_ci_high: float
    flag: str = ""

    def key(self):
        return (SCENARIOS.index(self.scenario), MODEL_KINDS.index(self.model_kind), int(self.lead_window.split("-")[0]))


RESULT_COLUMNS = ("scenario", "model_kind", "lead_window", "auc_mean", "ci_low", "ci_high", "n_test", "n_pos",
                  "n_splits", "split_ci_low", "split_ci_high", "flag")
MODEL_LABELS = {"logistic": "LR", "forest": "RF", "boosted": "GBT"}


def _fmt(v: float) -> str:
    return "" if math.isnan(v) else f"{v:.6f}"


@dataclass(frozen=True)
class ResultTable:
    rows: tuple[ResultRow, ...]

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(sorted(self.rows, key=ResultRow.key)))

    def __len__(self) -> int:
        return len(self.rows)

    def get(self, scenario: str, model_kind: str, start_day: int) -> ResultRow:
        for r in self.rows:
            if (r.scenario, r.model_kind, r.lead_window) == (scenario, model_kind, lead_window(start_day)):
                return r
        raise KeyError((scenario, model_kind, start_day))

    def write_csv(self, path: str | os.PathLike, header_comment: str | None = None) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RESULT_COLUMNS)
            for r in self.rows:
                w.writerow([r.scenario, r.model_kind, r.lead_window, _fmt(r.auc_mean), _fmt(r.ci_low),
                            _fmt(r.ci_high), r.n_test, r.n_pos, r.n_splits, _fmt(r.split_ci_low),
                            _fmt(r.split_ci_high), r.flag])

    def format_text(self) -> str:
        """Lead windows as rows, scenario x model as columns: 'AUC (low-high)'."""
        scenarios = [s for s in SCENARIOS if any(r.scenario == s for r in self.rows)]
        kinds = [k for k in MODEL_KINDS if any(r.model_kind == k for r in self.rows)]
        leads = sorted({r.lead_window for r in self.rows}, key=lambda w: int(w.split("-")[0]))
        cells = {(r.scenario, r.model_kind, r.lead_window): r for r in self.rows}
        header = ["Test window (day)"] + [f"{s} {MODEL_LABELS[k]}" for s in scenarios for k in kinds]
        lines = [header]
        for lw in leads:
            line = [lw]
            for s in scenarios:
                for k in kinds:
                    r = cells.get((s, k, lw))
                    if r is None or math.isnan(r.auc_mean):
                        line.append("n/a")
                    else:
                        line.append(f"{r.auc_mean:.2f} ({r.ci_low:.2f}-{r.ci_high:.2f})")
            lines.append(line)
        widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
        return "\n".join("  ".join(c.ljust(wd) for c, wd in zip(row, widths)).rstrip() for row in lines) + "\n"


# --------------------------------------------------------------------------- cells

@dataclass
class CellTask:
    config: dict
    variant: str
    scenario: str
    plan: SplitPlan
    matrix: FeatureMatrix
    labels: np.ndarray
    onset_days: list
    explain_rows: int = 0


@dataclass
class CellResult:
    variant: str
    scenario: str
    repeat: int
    test_ids: list
    test_labels: np.ndarray
    test_onset: list
    scores: dict
    choices: dict
    models: dict
    provenance: dict
    attributions: dict = field(default_factory=dict)
    seconds: float = 0.0


def audit_provenance(plan: SplitPlan, imputed: FeatureMatrix, normalized: FeatureMatrix) -> dict:
    """Every fitted statistic must trace back to exactly the training ids."""
    if set(plan.train_ids) & set(plan.test_ids):
        raise DataError("leakage audit: train and test overlap")
    train = ids_digest(plan.train_ids)
    prov = {"train_ids": train, "test_ids": ids_digest(plan.test_ids),
            "imputation_pool": imputed.imputed_with, "normalization_fit": normalized.normalization.fitted_on}
    if prov["imputation_pool"] != train or prov["normalization_fit"] != train:
        raise DataError(f"leakage audit failed for repeat {plan.repeat_index}: {prov}")
    return prov


def run_cell(task: CellTask) -> CellResult:
    t0 = time.perf_counter()
    cfg = RunConfig.from_dict(task.config)
    m = cfg.models
    plan = task.plan
    pos = {pid: i for i, pid in enumerate(task.matrix.patient_ids)}
    train_idx = np.array([pos[p] for p in plan.train_ids])
    test_idx = np.array([pos[p] for p in plan.test_ids])
    imputed = impute_knn(task.matrix, train_idx, k=cfg.features.knn_k)
    normalized = normalize(imputed, train_idx)
    provenance = audit_provenance(plan, imputed, normalized)
    X, y = normalized.values, task.labels
    Xtr, ytr, Xte = X[train_idx], y[train_idx], X[test_idx]
    cw = ClassWeights.balanced(ytr)
    base_seed = derive_seed(cfg.seed, task.scenario, plan.repeat_index)
    scores, choices, models, attributions = {}, {}, {}, {}
    for kind in m.kinds:
        if kind == "logistic":
            model = train_logistic(Xtr, ytr, cw, l2_lambda=m.l2_lambda, max_epochs=m.max_epochs)
            choices[kind] = None
        elif kind == "forest":
            choice = tune_forest(Xtr, ytr, derive_seed(base_seed, "tune", kind), m.n_estimators_grid,
                                 m.max_depth_grid, m.tolerance)
            model = train_forest(Xtr, ytr, cw, choice.n_estimators, choice.max_depth,
                                 seed=derive_seed(base_seed, "forest"))
            choices[kind] = (choice.n_estimators, choice.max_depth)
        else:
            opts = dict(learning_rate=m.learning_rate, l2_leaf_lambda=m.l2_leaf_lambda,
                        min_child_weight=m.min_child_weight)
            choice = tune_boosted(Xtr, ytr, derive_seed(base_seed, "tune", kind), m.n_estimators_grid,
                                  m.max_depth_grid, m.tolerance, **opts)
            model = train_boosted(Xtr, ytr, cw, choice.n_estimators, choice.max_depth, **opts)
            choices[kind] = (choice.n_estimators, choice.max_depth)
        scores[kind] = predict_proba(model, Xte)
        models[kind] = model_to_dict(model, {"scenario": task.scenario, "variant": task.variant,
                                             "repeat": plan.repeat_index, "choice": choices[kind],
                                             "feature_names": normalized.dictionary.names,
                                             "dictionary_digest": normalized.dictionary.digest(),
                                             "normalization": normalized.normalization.to_json(),
                                             "provenance": provenance})
        if task.explain_rows:
            rng = rng_for(cfg.seed, "explain", task.scenario)
            rows = np.sort(rng.permutation(len(test_idx))[:task.explain_rows])
            attributions[kind] = explain(model, Xte[rows], [plan.test_ids[i] for i in rows],
                                         normalized.dictionary.names, background_means=Xtr.mean(axis=0))
    dt = time.perf_counter() - t0
    logger.info("cell %s/%s repeat %d done in %.1fs", task.variant, task.scenario, plan.repeat_index, dt)
    return CellResult(task.variant, task.scenario, plan.repeat_index, list(plan.test_ids), y[test_idx],
                      [task.onset_days[i] for i in test_idx], scores, choices, models, provenance,
                      attributions, dt)


def run_cells(tasks: list[CellTask], jobs: int = 1) -> list[CellResult]:
    if jobs <= 1 or len(tasks) <= 1:
        return [run_cell(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
        return list(pool.map(run_cell, tasks))


def assemble_table(cells: Iterable[CellResult], lead_days: Sequence[int], level: float, n_bootstrap: int,
                   seed: int) -> ResultTable:
    grouped: dict = {}
    for c in cells:
        grouped.setdefault(c.scenario, []).append(c)
    rows = []
    for scenario, group in grouped.items():
        group = sorted(group, key=lambda c: c.repeat)
        for kind in group[0].scores:
            for day in lead_days:
                aucs, sets, n_test, n_pos, empty = [], [], 0, 0, 0
                for c in group:
                    keep = lead_subset(c.test_labels, c.test_onset, day)
                    s, y = c.scores[kind][keep], c.test_labels[keep]
                    n_test += int(keep.sum())
                    n_pos += int((y == 1).sum())
                    if (y == 1).any() and (y == 0).any():
                        aucs.append(auc_roc(s, y))
                        sets.append((s, y))
                    else:
                        empty += 1
                flag = f"splits_without_positives={empty}" if empty else ""
                nan = float("nan")
                if len(aucs) >= 2:
                    ci = confidence_interval(aucs, level, sets, n_bootstrap,
                                             rng_for(seed, "bootstrap", scenario, kind, day))
                    rows.append(ResultRow(scenario, kind, lead_window(day), ci.mean, ci.low, ci.high, n_test, n_pos,
                                          len(aucs), ci.split_low, ci.split_high, flag))
                else:
                    mean = float(np.mean(aucs)) if aucs else nan
                    flag = flag or "too_few_splits"
                    if not aucs:
                        flag = "no_positives"
                    rows.append(ResultRow(scenario, kind, lead_window(day), mean, nan, nan, n_test, n_pos,
                                          len(aucs), nan, nan, flag))
    return ResultTable(tuple(rows))


def roc_rows(cells: Iterable[CellResult], lead_days: Sequence[int]) -> list[tuple]:
    out = []
    for c in sorted(cells, key=lambda c: (SCENARIOS.index(c.scenario), c.repeat)):
        for kind in c.scores:
            for day in lead_days:
                keep = lead_subset(c.test_labels, c.test_onset, day)
                y = c.test_labels[keep]
                if not ((y == 1).any() and (y == 0).any()):
                    continue
                fpr, tpr, thr = roc_curve(c.scores[kind][keep], y)
                out += [(c.scenario, kind, lead_window(day), c.repeat, f, t, h) for f, t, h in zip(fpr, tpr, thr)]
    return out


# --------------------------------------------------------------------------- full evaluation

@dataclass
class ScenarioData:
    cohort: CohortTable
    matrix: FeatureMatrix
    labels: np.ndarray
    onset_days: list
    plans: list


@dataclass
class EvaluationResult:
    table: ResultTable
    ablation: ResultTable | None
    cells: list
    ablation_cells: list
    scenarios: dict
    summaries: dict  # (scenario, kind) -> SummaryRanking
    attributions: dict  # (scenario, kind) -> AttributionSet
    roc: list


def prepare_scenario(store: EventStore, scenario: str, cfg: RunConfig,
                     stage_cache: dict[str, StageSeries] | None = None) -> ScenarioData:
    cohort = build_cohort(store, scenario, stage_cache=stage_cache)
    fm = extract_raw_features(store, cohort, cfg.features.include_aki_stage, stage_cache=stage_cache)
    labels = np.array(cohort.labels(), dtype=int)
    plans = make_splits(fm.patient_ids, labels, cfg.evaluation.n_repeats, derive_seed(cfg.seed, "splits", scenario),
                        cfg.evaluation.train_fraction)
    return ScenarioData(cohort, fm, labels, cohort.onset_days(), plans)


def evaluate_matrix(store: EventStore, cfg: RunConfig, jobs: int = 1,
                    prepared: dict[str, ScenarioData] | None = None) -> EvaluationResult:
    """Train, score and tabulate every scenario x model x lead window (plus the
    without-AKI-stage ablation when enabled)."""
    ev = cfg.evaluation
    stage_cache: dict[str, StageSeries] = {}
    data = prepared or {s: prepare_scenario(store, s, cfg, stage_cache) for s in cfg.scenarios}
    cfg_dict = cfg.to_dict()
    tasks = []
    ablate = ev.ablation and cfg.features.include_aki_stage
    for scenario in cfg.scenarios:
        d = data[scenario]
        for plan in d.plans:
            explain_rows = cfg.explain.max_rows if plan.repeat_index == 0 else 0
            tasks.append(CellTask(cfg_dict, MAIN, scenario, plan, d.matrix, d.labels, d.onset_days, explain_rows))
            if ablate:
                tasks.append(CellTask(cfg_dict, WITHOUT_AKI, scenario, plan, d.matrix.drop("aki_stage_day1"),
                                      d.labels, d.onset_days))
    results = run_cells(tasks, jobs)
    main = [r for r in results if r.variant == MAIN]
    abl = [r for r in results if r.variant == WITHOUT_AKI]
    table = assemble_table(main, ev.lead_days, ev.ci_level, ev.n_bootstrap, cfg.seed)
    ablation = assemble_table(abl, ev.lead_days, ev.ci_level, ev.n_bootstrap, cfg.seed) if abl else None
    attributions, summaries = {}, {}
    for r in main:
        for kind, a in r.attributions.items():
            attributions[(r.scenario, kind)] = a
            summaries[(r.scenario, kind)] = summarize(a)
    return EvaluationResult(table, ablation, main, abl, data, summaries, attributions,
                            roc_rows(main, ev.lead_days))
