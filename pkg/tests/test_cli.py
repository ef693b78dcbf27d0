import csv
import json

import numpy as np
import pytest

from hyperk import __version__, cli
from hyperk.errors import NumericError
from hyperk.features import read_feature_matrix
from hyperk.ingest import FILE_FIELDS
from hyperk.models import load_model

SMALL = {"models": {"n_estimators_grid": [5, 10], "max_depth_grid": [2, 3], "max_epochs": 200},
         "evaluation": {"n_bootstrap": 100}, "explain": {"max_rows": 30, "top_k": 10},
         "synth": {"n_patients": 600, "prevalence": 0.06}}


def write_config(path, **over):
    cfg = json.loads(json.dumps(SMALL))
    cfg.update(over)
    path.write_text(json.dumps(cfg))
    return str(path)


def data_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(line for line in fh if not line.startswith("#")))[1:]


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    base = tmp_path_factory.mktemp("run")
    out = base / "out"
    cfg = write_config(base / "cfg.json", output_dir=str(out))
    assert cli.main(["run", "--config", cfg, "--jobs", "1"]) == 0
    return base, cfg, out


def test_run_writes_full_table_and_artifacts(run_dir):
    _, _, out = run_dir
    rows = data_rows(out / "results.csv")
    assert len(rows) == 24
    assert {(r[0], r[1]) for r in rows} == {(s, k) for s in ("case1", "case2")
                                            for k in ("logistic", "forest", "boosted")}
    assert len(data_rows(out / "ablation_results.csv")) == 24
    first = (out / "results.csv").read_text().splitlines()[0]
    assert first.startswith(f"# hyperk {__version__} config_hash=") and "seed=20240101" in first
    for name in ("results.txt", "roc_points.csv", "aki_stages.csv", "manifest.json", "config.json", "run.log"):
        assert (out / name).is_file()
    for s in ("case1", "case2"):
        assert (out / s / "cohort.csv").is_file()
        assert len(list((out / s / "models").glob("*.json"))) == 24
        for kind in ("logistic", "forest", "boosted"):
            assert len(data_rows(out / s / "attributions" / f"{kind}_summary.csv")) == 10
    log = (out / "run.log").read_text()
    for stage in ("ingest", "cohort_and_features", "evaluate", "write"):
        assert f"stage={stage} seconds=" in log
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["provenance"]["version"] == __version__
    assert "results.csv" in manifest["files"]


def test_rerun_is_byte_identical_and_jobs_do_not_matter(run_dir, tmp_path):
    base, cfg, out = run_dir
    again = tmp_path / "again"
    assert cli.main(["run", "--config", cfg, "--jobs", "2", "--out", str(again)]) == 0
    for name in ("results.csv", "ablation_results.csv", "roc_points.csv", "manifest.json"):
        assert (out / name).read_bytes() == (again / name).read_bytes(), name


def test_single_scenario_gives_twelve_rows(run_dir, tmp_path):
    _, cfg, _ = run_dir
    assert cli.main(["run", "--config", cfg, "--scenario", "case1", "--jobs", "1", "--out", str(tmp_path)]) == 0
    rows = data_rows(tmp_path / "results.csv")
    assert len(rows) == 12 and {r[0] for r in rows} == {"case1"}


def test_seed_override_changes_hash(run_dir, tmp_path, capsys):
    _, cfg, _ = run_dir
    assert cli.main(["validate-config", "--config", cfg]) == 0
    a = capsys.readouterr().out.splitlines()[0]
    assert cli.main(["validate-config", "--config", cfg, "--seed", "7"]) == 0
    b = capsys.readouterr().out.splitlines()[0]
    assert a.startswith("config ok: hash=") and a != b and "seed=7" in b


def test_explain_top_k_and_linear_closed_form(run_dir, tmp_path):
    _, cfg, out = run_dir
    model_path = out / "case2" / "models" / "main_logistic_r0.json"
    rows = out / "case2" / "features_test_r0.csv"
    assert cli.main(["explain", "--config", cfg, "--model", str(model_path), "--rows", str(rows),
                     "--limit", "25", "--top-k", "10", "--out", str(tmp_path)]) == 0
    assert len(data_rows(tmp_path / "main_logistic_r0_summary.csv")) == 10
    model, _ = load_model(model_path)
    matrix, _ = read_feature_matrix(rows)
    phi = np.array([[float(v) for v in r[3:]] for r in data_rows(tmp_path / "main_logistic_r0_phi.csv")])
    assert phi.shape == (25, len(matrix.dictionary.names))
    want = model.weights * (matrix.values[:25] - model.background_means)
    np.testing.assert_allclose(phi, want, rtol=0, atol=1e-12)


def test_explain_refuses_mismatched_config(run_dir, tmp_path):
    _, cfg, out = run_dir
    model_path = out / "case2" / "models" / "main_forest_r0.json"
    rows = out / "case2" / "features_test_r0.csv"
    code = cli.main(["explain", "--config", cfg, "--seed", "99", "--model", str(model_path), "--rows", str(rows),
                     "--out", str(tmp_path)])
    assert code == 2
    assert not list(tmp_path.iterdir())


def test_explain_refuses_rows_from_another_normalization(run_dir, tmp_path):
    _, cfg, out = run_dir
    model_path = out / "case2" / "models" / "main_forest_r1.json"
    rows = out / "case2" / "features_test_r0.csv"
    assert cli.main(["explain", "--config", cfg, "--model", str(model_path), "--rows", str(rows),
                     "--out", str(tmp_path)]) == 3


def test_synth_manifest_and_determinism(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", synth={"n_patients": 2000, "prevalence": 0.02})
    assert cli.main(["synth", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["synth", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(list(FILE_FIELDS) + ["manifest.json"])
    a = (tmp_path / "a" / "manifest.json").read_bytes()
    assert a == (tmp_path / "b" / "manifest.json").read_bytes()
    manifest = json.loads(a)
    assert 32 <= manifest["positive_count"] <= 48
    assert manifest["provenance"]["seed"] == 20240101


def test_run_from_synth_directory(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", scenarios=["case2"], evaluation={"n_bootstrap": 20, "ablation": False})
    assert cli.main(["synth", "--config", cfg, "--out", str(tmp_path / "data")]) == 0
    assert cli.main(["run", "--config", cfg, "--jobs", "1", "--input", str(tmp_path / "data"),
                     "--out", str(tmp_path / "out")]) == 0
    assert len(data_rows(tmp_path / "out" / "results.csv")) == 12


@pytest.mark.parametrize("payload,code", [
    ({"bogus": 1}, 2),
    ({"evaluation": {"n_repeats": 0}}, 2),
    ({"models": {"kinds": ["svm"]}}, 2),
    ({"input_dir": "/nonexistent/hyperk"}, 3),
])
def test_exit_codes(tmp_path, payload, code):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(dict(payload, output_dir=str(tmp_path / "out"))))
    assert cli.main(["run", "--config", str(path), "--jobs", "1"]) == code


def test_invalid_json_and_missing_config(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["validate-config", "--config", str(bad)]) == 2
    assert cli.main(["validate-config", "--config", str(tmp_path / "missing.json")]) == 2


def test_failed_run_keeps_prior_artifacts(run_dir, tmp_path, monkeypatch):
    _, cfg, out = run_dir
    before = {p: p.read_bytes() for p in out.rglob("*") if p.is_file()}

    def boom(*args, **kwargs):
        raise NumericError("logistic regression diverged at epoch 3")

    monkeypatch.setattr(cli, "evaluate_matrix", boom)
    assert cli.main(["run", "--config", cfg, "--jobs", "1"]) == 4
    after = {p: p.read_bytes() for p in out.rglob("*") if p.is_file()}
    assert before == after
    assert not [p for p in out.parent.iterdir() if p.name.startswith(".hyperk-staging-")]
