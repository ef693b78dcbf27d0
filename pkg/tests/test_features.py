import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hyperk.clinical import build_cohort
from hyperk.errors import ImputationError
from hyperk.features import (
    FeatureDictionary,
    FeatureMatrix,
    FeatureSpec,
    closest_to_admission,
    extract_raw_features,
    feature_dictionary,
    impute_knn,
    normalize,
    read_feature_matrix,
    write_feature_matrix,
)
from hyperk.ingest import HOUR, MEDICATION_CATEGORIES

from builders import ADMIT, fluid, lab, med, patient, store
from oracles import knn_impute_naive


def test_dictionary_order_and_ablation():
    fd = feature_dictionary()
    names = fd.names
    assert names[:3] == ["age", "sex", "potassium"]
    assert names.index("aki_stage_day1") < names.index("fluid_balance_24h")
    assert names[-len(MEDICATION_CATEGORIES):] == [c for _, c in MEDICATION_CATEGORIES]
    assert "aki_stage_day1" not in feature_dictionary(include_aki_stage=False).names
    assert len(feature_dictionary(False)) == len(fd) - 1


@pytest.mark.parametrize("times,expected", [
    ([(2, 4.0), (5, 4.5)], 4.0),
    ([(-1, 3.0), (30, 5.0)], 3.0),          # nothing in day 1: backfill, nearest wins
    ([(-3, 3.0), (3, 5.0)], 5.0),           # day-1 window preferred over closer pre-admission
    ([(-13, 3.0), (49, 5.0)], None),
    ([(24, 4.2)], 4.2),
    ([(-12, 3.3)], 3.3),
])
def test_closest_to_admission(times, expected):
    series = [(ADMIT + h * HOUR, v) for h, v in times]
    assert closest_to_admission(series, ADMIT) == expected


def test_backfill_tie_goes_to_earlier():
    series = [(ADMIT - 2 * HOUR, 1.0), (ADMIT + 26 * HOUR, 2.0), (ADMIT + 2 * HOUR, 3.0)]
    assert closest_to_admission(series[:2], ADMIT) == 1.0
    assert closest_to_admission(series, ADMIT) == 3.0


def test_extract_hand_built():
    s = store([patient("p1"), patient("p2")],
              labs=[lab("p1", 1, "potassium", 5.1), lab("p1", 3, "phosphate", 4.4),
                    lab("p2", 2, "potassium", 4.0)],
              meds=[med("p1", 5, "vasopressor"), med("p2", 30, "vasopressor"), med("p2", 1, "saline")],
              fluids=[fluid("p1", 2, "intake", 1000), fluid("p1", 10, "output", 300),
                      fluid("p1", 24, "intake", 999)])
    fm = extract_raw_features(s, build_cohort(s, "case2"))
    fd = fm.dictionary
    row = dict(zip(fd.names, fm.values[0]))
    assert row["potassium"] == 5.1 and row["phosphate"] == 4.4
    assert row["fluid_balance_24h"] == 700.0
    assert row["med_vasop_yn"] == 1.0
    assert row["aki_stage_day1"] == 0.0
    row2 = dict(zip(fd.names, fm.values[1]))
    assert row2["med_vasop_yn"] == 0.0 and row2["iv_saline_yn"] == 1.0
    assert math.isnan(row2["fluid_balance_24h"]) and math.isnan(row2["phosphate"])
    assert fm.mask[1, fd.index("phosphate")] and not fm.mask[0, fd.index("phosphate")]


def _toy(X, kinds=None):
    X = np.asarray(X, dtype=float)
    kinds = kinds or ["continuous"] * X.shape[1]
    fd = FeatureDictionary(tuple(FeatureSpec(f"f{j}", k) for j, k in enumerate(kinds)))
    return FeatureMatrix([f"p{i}" for i in range(len(X))], X, np.isnan(X), fd)


def test_knn_hand_example():
    X = [[0.0, 1.0], [1.0, 2.0], [2.0, 3.0], [10.0, 100.0], [0.5, np.nan]]
    out = impute_knn(_toy(X), train_idx=range(5), k=3).values
    assert out[4, 1] == pytest.approx((1.0 + 2.0 + 3.0) / 3)


def test_knn_tie_goes_to_lower_index():
    X = [[1.0, 10.0], [1.0, 20.0], [1.0, 30.0], [1.0, 40.0], [1.0, np.nan]]
    out = impute_knn(_toy(X), train_idx=range(4), k=2).values
    assert out[4, 1] == 15.0


def test_knn_falls_back_to_training_mean_and_errors_without_values():
    X = [[np.nan, 1.0], [np.nan, 3.0], [5.0, np.nan]]
    out = impute_knn(_toy(X), train_idx=[0, 1, 2], k=3).values
    # row 2 shares no observed dimension with anyone -> training mean of f1
    assert out[2, 1] == 2.0
    with pytest.raises(ImputationError):
        impute_knn(_toy(X), train_idx=[0, 1], k=3)


def test_knn_never_uses_test_rows():
    X = [[0.0, 0.0], [1.0, 1.0], [0.1, 1000.0], [0.05, np.nan]]
    out = impute_knn(_toy(X), train_idx=[0, 1], k=1).values
    assert out[3, 1] == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_knn_matches_loop_oracle(seed, k):
    rng = np.random.default_rng(seed)
    n, p = 25, 5
    X = rng.normal(size=(n, p))
    X[rng.random((n, p)) < 0.3] = np.nan
    X[:, 4] = rng.integers(0, 2, n)
    X[rng.random(n) < 0.2, 4] = np.nan
    kinds = ["continuous"] * 4 + ["binary"]
    train = sorted(rng.choice(n, 15, replace=False))
    fm = _toy(X, kinds)
    try:
        got = impute_knn(fm, train, k=k).values
    except ImputationError:
        Xt = X[train]
        assert (np.isnan(Xt).all(axis=0) & np.isnan(X).any(axis=0)).any()
        return
    want = knn_impute_naive(X, train, continuous=range(4), k=k)
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_normalize_uses_training_rows_only():
    X = [[1.0, 0.0], [3.0, 1.0], [100.0, 1.0]]
    fm = normalize(_toy(X, ["continuous", "binary"]), [0, 1])
    np.testing.assert_allclose(fm.values[:, 0], [-1.0, 1.0, 98.0])
    np.testing.assert_array_equal(fm.values[:, 1], [0.0, 1.0, 1.0])
    assert fm.normalization.mean == {"f0": 2.0}


def test_normalize_constant_feature_warns(caplog):
    fm = normalize(_toy([[5.0], [5.0], [7.0]]), [0, 1])
    assert fm.values[:, 0].tolist() == [0.0, 0.0, 2.0]
    assert "zero training variance" in caplog.text


def test_synthetic_pipeline_and_round_trip(tmp_path):
    from hyperk.synth import SynthConfig, generate_synthetic
    s = generate_synthetic(SynthConfig(n_patients=120), seed=5)
    fm = extract_raw_features(s, build_cohort(s, "case2"))
    train = list(range(0, len(fm.patient_ids), 2))
    done = normalize(impute_knn(fm, train), train)
    assert done.complete
    assert (done.mask == fm.mask).all()
    path = tmp_path / "features.csv"
    write_feature_matrix(done, path, config_hash="abc")
    back, sidecar = read_feature_matrix(path)
    assert sidecar["config_hash"] == "abc"
    assert back.patient_ids == done.patient_ids
    np.testing.assert_array_equal(back.values, done.values)
    np.testing.assert_array_equal(back.mask, done.mask)
    assert back.normalization == done.normalization
