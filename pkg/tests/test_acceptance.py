"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``. The end-to-end criteria share
one full pipeline run on a 5,000-patient synthetic cohort.
"""

import csv
import json
import random
import time

import numpy as np
import pytest

from hyperk import cli
from hyperk.clinical import label_hyperkalemia, stage_series_from_events
from hyperk.config import RunConfig
from hyperk.evaluation import auc_roc, evaluate_matrix
from hyperk.explain import model_margin, shap_brute_force, shap_tree
from hyperk.features import read_feature_matrix
from hyperk.ingest import DAY, HOUR
from hyperk.models import load_model
from hyperk.models.logistic import logistic_gradient, logistic_loss
from hyperk.models.weights import ClassWeights
from hyperk.synth import generate_synthetic

from builders import random_ensemble
from oracles import naive_stage_series, numeric_gradient, pairwise_auc
from test_clinical import random_patient_series

KINDS = ("logistic", "forest", "boosted")
SCENARIOS = ("case1", "case2")
PLANTED = {"phosphate", "potassium", "fluid_balance_24h", "med_vasop_yn"}


def report(capsys, number, title, ok, detail=""):
    with capsys.disabled():
        print(f"\n[criterion {number:2d}] {'PASS' if ok else 'FAIL'}  {title}" + (f"  ({detail})" if detail else ""))


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


@pytest.fixture(scope="module")
def signal_run(tmp_path_factory):
    """Full ``run`` on the planted-signal cohort (n=5,000, prevalence 2%)."""
    base = tmp_path_factory.mktemp("signal")
    cfg_path = base / "cfg.json"
    cfg_path.write_text(json.dumps({"output_dir": str(base / "out"), "explain": {"max_rows": 2500},
                                    "synth": {"n_patients": 5000, "prevalence": 0.02}}))
    t0 = time.perf_counter()
    code = cli.main(["run", "--config", str(cfg_path), "--jobs", "1"])
    seconds = time.perf_counter() - t0
    assert code == 0
    out = base / "out"
    table = {(r["scenario"], r["model_kind"], int(r["lead_window"].split("-")[0])): r
             for r in read_rows(out / "results.csv")}
    return out, table, seconds


def test_criterion_01_reference_values_replaced_by_properties(capsys):
    # the published AUCs come from restricted ICU databases; this suite checks
    # the substitute properties (criteria 2-11) instead of matching numbers
    present = sorted(int(name.split("_")[2]) for name in globals() if name.startswith("test_criterion_"))
    ok = present == list(range(1, 12))
    report(capsys, 1, "reference AUCs documented as targets only; property-based substitutes 2-11 present", ok,
           f"criteria found: {present}")
    assert ok


def test_criterion_02_staging_engine_matches_oracle(capsys):
    rng = random.Random(2024)
    cases = [random_patient_series(rng) for _ in range(1000)]
    t0 = time.perf_counter()
    mismatches = 0
    for creat, urine, dial, weight in cases:
        fast = stage_series_from_events("x", creat, urine, dial, weight, 0).steps
        mismatches += fast != naive_stage_series(creat, urine, dial, weight, 0)
    seconds = time.perf_counter() - t0
    ok = mismatches == 0 and seconds < 10
    report(capsys, 2, "KDIGO staging engine == naive oracle on 1,000 random series, < 10 s", ok,
           f"mismatches={mismatches}, {seconds:.2f}s including the oracle")
    assert ok


# (neighbourhood, values, calcium gluconate) -> (potassium events in hours, expected label).
# The candidate is K=6.2 at 10h; the neighbourhood is the open interval (4h, 16h).
# For a single result, "mixed" places a normal value exactly on the boundary, outside it.
LABEL_MATRIX = {
    ("single", "all_high", True): ([(10, 6.2)], True),
    ("single", "all_high", False): ([(10, 6.2)], True),
    ("single", "mixed", True): ([(10, 6.2), (16, 5.0)], True),
    ("single", "mixed", False): ([(10, 6.2), (16, 5.0)], True),
    ("single", "all_low", True): ([(10, 5.9)], False),
    ("single", "all_low", False): ([(10, 5.9)], False),
    ("multiple", "all_high", True): ([(10, 6.2), (12, 6.5)], True),
    ("multiple", "all_high", False): ([(10, 6.2), (12, 6.5)], True),
    ("multiple", "mixed", True): ([(10, 6.2), (11.5, 5.0)], True),
    ("multiple", "mixed", False): ([(10, 6.2), (11.5, 5.0)], False),
    ("multiple", "all_low", True): ([(10, 5.9), (11.5, 5.0)], False),
    ("multiple", "all_low", False): ([(10, 5.9), (11.5, 5.0)], False),
}


def test_criterion_03_labeling_case_matrix(capsys):
    wrong = []
    for key, (ks, expected) in LABEL_MATRIX.items():
        calcium = [11 * HOUR] if key[2] else []
        label = label_hyperkalemia([(round(h * HOUR), v) for h, v in ks], calcium, 0, 14 * DAY)
        if label.hyperkalemic != expected or (expected and label.onset_time != 10 * HOUR):
            wrong.append(key)
    ok = len(LABEL_MATRIX) == 12 and not wrong
    report(capsys, 3, "labeling rule on all 12 neighbourhood x values x calcium combinations", ok,
           f"wrong={wrong}")
    assert ok


def test_criterion_04_shapley_exact_and_locally_accurate(capsys, signal_run):
    rng = np.random.default_rng(44)
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(50):
        kind = "forest" if i % 2 == 0 else "boosted"
        p = int(rng.integers(2, 13))
        model = random_ensemble(rng, kind, p, int(rng.integers(1, 5)), int(rng.integers(1, 6)))
        x = rng.normal(size=p)
        _, brute = shap_brute_force(model, x)
        _, fast = shap_tree(model, x)
        worst = max(worst, float(np.abs(np.asarray(fast).ravel() - brute).max()))
    seconds = time.perf_counter() - t0

    out, _, _ = signal_run
    gap, scored = 0.0, 0
    for scenario in SCENARIOS:
        matrix, _ = read_feature_matrix(out / scenario / "features_test_r0.csv")
        row_of = {pid: i for i, pid in enumerate(matrix.patient_ids)}
        for kind in KINDS:
            model, _ = load_model(out / scenario / "models" / f"main_{kind}_r0.json")
            with open(out / scenario / "attributions" / f"{kind}_phi.csv", newline="") as fh:
                rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))][1:]
            X = matrix.values[[row_of[r[0]] for r in rows]]
            totals = np.array([float(r[1]) + sum(float(v) for v in r[3:]) for r in rows])
            gap = max(gap, float(np.abs(totals - model_margin(model, X)).max()))
            scored += len(rows)
    ok = worst <= 1e-9 and gap < 1e-6 and seconds < 60
    report(capsys, 4, "TreeSHAP == brute force on 50 random ensembles; local accuracy on scored patients", ok,
           f"max |diff|={worst:.2e}, {seconds:.1f}s; local-accuracy gap={gap:.2e} over {scored} attributions")
    assert ok


def test_criterion_05_logistic_gradient(capsys):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        n, p = int(rng.integers(5, 60)), int(rng.integers(1, 10))
        X = rng.normal(size=(n, p)) * rng.uniform(0.5, 3.0)
        y = rng.integers(0, 2, n).astype(float)
        sw = ClassWeights(float(rng.uniform(0.5, 10)), float(rng.uniform(0.2, 2))).sample_weights(y)
        theta = rng.normal(size=p + 1)
        lam = float(rng.uniform(0, 0.5))
        an = logistic_gradient(theta, X, y, sw, lam)
        fd = numeric_gradient(lambda t: logistic_loss(t, X, y, sw, lam), theta, eps=1e-5)
        worst = max(worst, float((np.abs(an - fd) / np.maximum(np.abs(fd), 1e-8)).max()))
    ok = worst < 1e-4
    report(capsys, 5, "logistic gradient vs central differences, 100 instances", ok, f"max rel err={worst:.2e}")
    assert ok


def test_criterion_06_auc_oracle(capsys):
    rng = np.random.default_rng(6)
    worst, done = 0.0, 0
    while done < 500:
        n = int(rng.integers(2, 201))
        y = rng.integers(0, 2, n)
        if y.min() == y.max():
            continue
        s = rng.integers(0, int(rng.integers(2, 50)), n) / 7.0  # plenty of ties
        worst = max(worst, abs(auc_roc(s, y) - pairwise_auc(s.tolist(), y.tolist())))
        done += 1
    ok = worst <= 1e-12
    report(capsys, 6, "auc_roc == pairwise concordance on 500 random sets (n <= 200)", ok, f"max |diff|={worst:.1e}")
    assert ok


def test_criterion_07_signal_recovery(capsys, signal_run):
    _, table, seconds = signal_run
    parts, ok = [], seconds < 300
    for scenario in SCENARIOS:
        auc = {k: float(table[(scenario, k, 1)]["auc_mean"]) for k in KINDS}
        ok &= all(v >= 0.80 for v in auc.values())
        ok &= all(auc[k] >= auc["logistic"] - 0.02 for k in ("forest", "boosted"))
        parts.append(f"{scenario} " + " ".join(f"{k}={v:.3f}" for k, v in auc.items()))
    report(capsys, 7, "planted signal: every model AUC >= 0.80 at lead 1, trees >= LR - 0.02, < 5 min", ok,
           "; ".join(parts) + f"; run {seconds:.0f}s")
    assert ok


def test_criterion_08_lead_time_degradation(capsys, signal_run):
    _, table, _ = signal_run
    parts, ok = [], True
    for scenario in SCENARIOS:
        for k in KINDS:
            a1, a4 = float(table[(scenario, k, 1)]["auc_mean"]), float(table[(scenario, k, 4)]["auc_mean"])
            ok &= a4 <= a1
            parts.append(f"{scenario}/{k} {a1:.3f}->{a4:.3f}")
    report(capsys, 8, "AUC(lead 4) <= AUC(lead 1) for every model", ok, ", ".join(parts))
    assert ok


def test_criterion_09_importance_recovery(capsys, signal_run):
    out, _, _ = signal_run
    parts, ok = [], True
    for scenario in SCENARIOS:
        for k in KINDS:
            summary = json.loads((out / scenario / "attributions" / f"{k}_summary.json").read_text())
            top5 = [f["feature"] for f in summary["features"][:5]]
            hit = PLANTED <= set(top5)
            ok &= hit
            parts.append(f"{scenario}/{k}: {len(PLANTED & set(top5))}/4")
    report(capsys, 9, "mean-|phi| top-5 contains the four planted features", ok, ", ".join(parts))
    assert ok


def test_criterion_10_null_experiment(capsys):
    synth = {"n_patients": 5000, "prevalence": 0.02, "effect_phosphate": 0.0, "effect_potassium": 0.0,
             "effect_fluid_balance": 0.0, "effect_vasopressor": 0.0, "effect_aki": 0.0}
    cfg = RunConfig.from_dict({"synth": synth, "evaluation": {"ablation": False}, "explain": {"max_rows": 1}})
    result = evaluate_matrix(generate_synthetic(cfg.synth, cfg.seed), cfg)
    aucs = {(r.scenario, r.model_kind, r.lead_window): r.auc_mean for r in result.table.rows}
    ok = all(0.45 <= v <= 0.55 for v in aucs.values())
    lo, hi = min(aucs.values()), max(aucs.values())
    report(capsys, 10, "zero planted effect: every AUC in [0.45, 0.55]", ok,
           f"{len(aucs)} rows, range {lo:.3f}-{hi:.3f}")
    assert ok


def test_criterion_11_determinism(capsys, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["run", "--out", str(a)]) == 0
    assert cli.main(["run", "--out", str(b)]) == 0
    same = (a / "results.csv").read_bytes() == (b / "results.csv").read_bytes()
    same_ablation = (a / "ablation_results.csv").read_bytes() == (b / "ablation_results.csv").read_bytes()
    ok = same and same_ablation
    report(capsys, 11, "two full runs with one master seed give byte-identical result tables", ok,
           f"results identical={same}, ablation identical={same_ablation}")
    assert ok
