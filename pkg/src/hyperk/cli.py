"""Command line entry point: ``hyperk {synth,run,explain,validate-config}``.

Every command writes into a private staging directory next to its output
directory and moves files into place only after all stages succeeded, so a
failed run leaves earlier artifacts untouched. CSV artifacts start with a
``# hyperk <version> config_hash=<hash> seed=<seed>`` line; JSON artifacts
carry the same fields under ``"provenance"``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .clinical import SCENARIOS, build_cohort, write_stage_series_csv
from .config import RunConfig, load_config
from .errors import ConfigError, DataError, HyperkError
from .evaluation import MAIN, evaluate_matrix, prepare_scenario
from .explain import explain, summarize, write_phi_csv, write_summary
from .features import impute_knn, normalize, read_feature_matrix, write_feature_matrix
from .ingest import FILE_FIELDS, load_event_store, write_event_store
from .models import LogisticModel, load_model
from .synth import generate_synthetic

logger = logging.getLogger(__name__)

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class StageFailure(Exception):
    def __init__(self, stage: str, error: HyperkError):
        super().__init__(f"stage {stage!r} failed: {error}")
        self.stage = stage
        self.error = error


class Staging:
    """Collects outputs in a temporary sibling directory, then publishes them."""

    def __init__(self, final: Path):
        self.final = Path(final)
        try:
            self.final.mkdir(parents=True, exist_ok=True)
            self.tmp = Path(tempfile.mkdtemp(prefix=".hyperk-staging-", dir=self.final.parent))
        except OSError as exc:
            raise DataError(f"cannot write output directory {self.final}: {exc}") from exc

    def path(self, rel: str) -> Path:
        p = self.tmp / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def files(self) -> list[str]:
        return sorted(str(p.relative_to(self.tmp)) for p in self.tmp.rglob("*") if p.is_file())

    def publish(self) -> None:
        for rel in self.files():
            dest = self.final / rel
            dest.parent.mkdir(parents=True, exist_ok=True)
            os.replace(self.tmp / rel, dest)
        self.discard()

    def discard(self) -> None:
        shutil.rmtree(self.tmp, ignore_errors=True)


def provenance(cfg: RunConfig) -> dict:
    return {"tool": "hyperk", "version": __version__, "config_hash": cfg.config_hash(), "seed": cfg.seed}


def header(cfg: RunConfig) -> str:
    return f"hyperk {__version__} config_hash={cfg.config_hash()} seed={cfg.seed}"


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def write_json(path: Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


class StageClock:
    def __init__(self):
        self.timings: list[tuple[str, float]] = []

    @contextmanager
    def stage(self, name: str):
        logger.info("stage %s: start", name)
        t0 = time.perf_counter()
        try:
            yield
        except HyperkError as exc:
            raise StageFailure(name, exc) from exc
        dt = time.perf_counter() - t0
        self.timings.append((name, dt))
        logger.info("stage %s: done in %.2fs", name, dt)


# --------------------------------------------------------------------------- synth

def cmd_synth(cfg: RunConfig, out_dir: str | None = None) -> Path:
    out = Path(out_dir or cfg.input_dir or "hyperk_data")
    clock = StageClock()
    staging = Staging(out)
    try:
        with clock.stage("generate"):
            store = generate_synthetic(cfg.synth, cfg.seed)
        with clock.stage("write"):
            counts = write_event_store(store, staging.tmp)
        with clock.stage("label"):
            positives = {s: sum(build_cohort(store, s).labels()) for s in SCENARIOS}
        files = {f: sha256_file(staging.tmp / f) for f in FILE_FIELDS}
        manifest = {
            "provenance": provenance(cfg),
            "synth": cfg.to_dict()["synth"],
            "n_patients": cfg.synth.n_patients,
            "row_counts": counts,
            "positive_count": positives["case2"],
            "positives_by_scenario": positives,
            "files": files,
            "dataset_hash": hashlib.sha256(json.dumps(files, sort_keys=True).encode()).hexdigest(),
        }
        write_json(staging.path("manifest.json"), manifest)
        staging.publish()
    except BaseException:
        staging.discard()
        raise
    logger.info("synthetic dataset written to %s (%d patients, %d positive)", out, cfg.synth.n_patients,
                positives["case2"])
    return out


# --------------------------------------------------------------------------- run

def _load_store(cfg: RunConfig, input_dir: str | None):
    src = input_dir or cfg.input_dir
    if src:
        return load_event_store(src), str(src)
    logger.info("no input directory given; generating the configured synthetic cohort")
    return generate_synthetic(cfg.synth, cfg.seed), "synthetic"


def _write_roc(path: Path, rows: list, head: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {head}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "model_kind", "lead_window", "repeat", "fpr", "tpr", "threshold"])
        for s, k, lw, r, f, t, h in rows:
            w.writerow([s, k, lw, r, repr(float(f)), repr(float(t)), repr(float(h))])


def cmd_run(cfg: RunConfig, jobs: int = 1, input_dir: str | None = None, out_dir: str | None = None) -> Path:
    out = Path(out_dir or cfg.output_dir)
    clock = StageClock()
    head = header(cfg)
    prov = provenance(cfg)
    t_start = time.perf_counter()
    staging = Staging(out)
    try:
        with clock.stage("ingest"):
            store, source = _load_store(cfg, input_dir)
        stage_cache: dict = {}
        with clock.stage("cohort_and_features"):
            prepared = {s: prepare_scenario(store, s, cfg, stage_cache) for s in cfg.scenarios}
        with clock.stage("evaluate"):
            result = evaluate_matrix(store, cfg, jobs=jobs, prepared=prepared)
        with clock.stage("write"):
            _write_run_artifacts(staging, cfg, result, prepared, stage_cache, head, prov)
            manifest = {
                "provenance": prov,
                "source": source,
                "scenarios": {s: _scenario_summary(result, prepared, s) for s in cfg.scenarios},
                "files": {rel: sha256_file(staging.tmp / rel) for rel in staging.files()},
            }
            write_json(staging.path("manifest.json"), manifest)
        total = time.perf_counter() - t_start
        with open(staging.path("run.log"), "w", encoding="utf-8") as fh:
            fh.write(f"# {head}\n")
            for name, dt in clock.timings:
                fh.write(f"stage={name} seconds={dt:.3f}\n")
            fh.write(f"total_seconds={total:.3f} jobs={jobs}\n")
        staging.publish()
    except BaseException:
        staging.discard()
        raise
    logger.info("run complete in %.1fs; artifacts in %s", total, out)
    return out


def _scenario_summary(result, prepared, scenario: str) -> dict:
    d = prepared[scenario]
    choices = {f"{c.variant}/r{c.repeat}": {k: v for k, v in sorted(c.choices.items())}
               for c in result.cells + result.ablation_cells if c.scenario == scenario}
    return {"n_cohort": len(d.cohort.rows), "n_included": len(d.labels), "n_positive": int(d.labels.sum()),
            "exclusions": d.cohort.exclusion_counts(), "grid_choices": choices}


def _write_run_artifacts(staging: Staging, cfg: RunConfig, result, prepared, stage_cache, head, prov) -> None:
    write_json(staging.path("config.json"), {"provenance": prov, "config": cfg.to_dict()})
    result.table.write_csv(staging.path("results.csv"), head)
    staging.path("results.txt").write_text(f"# {head}\n" + result.table.format_text(), encoding="utf-8")
    if result.ablation is not None:
        result.ablation.write_csv(staging.path("ablation_results.csv"), head)
        staging.path("ablation_results.txt").write_text(f"# {head}\n" + result.ablation.format_text(),
                                                        encoding="utf-8")
    _write_roc(staging.path("roc_points.csv"), result.roc, head)
    write_stage_series_csv([stage_cache[p] for p in sorted(stage_cache)], staging.path("aki_stages.csv"), head)
    for scenario in cfg.scenarios:
        d = prepared[scenario]
        d.cohort.write_csv(staging.path(f"{scenario}/cohort.csv"), head)
        write_feature_matrix(d.matrix, staging.path(f"{scenario}/features_raw.csv"), cfg.config_hash(),
                             {"provenance": prov})
        # held-out rows of repeat 0, imputed and normalized exactly as that cell did
        plan = d.plans[0]
        pos = {p: i for i, p in enumerate(d.matrix.patient_ids)}
        train_idx = np.array([pos[p] for p in plan.train_ids])
        test_idx = np.array([pos[p] for p in plan.test_ids])
        fm = normalize(impute_knn(d.matrix, train_idx, k=cfg.features.knn_k), train_idx)
        test = type(fm)([fm.patient_ids[i] for i in test_idx], fm.values[test_idx], fm.mask[test_idx],
                        fm.dictionary, fm.normalization, fm.imputed_with)
        write_feature_matrix(test, staging.path(f"{scenario}/features_test_r0.csv"), cfg.config_hash(),
                             {"provenance": prov, "repeat": 0, "rows": "test"})
    for c in result.cells + result.ablation_cells:
        for kind, md in c.models.items():
            md = dict(md, meta=dict(md["meta"], **prov))
            write_json(staging.path(f"{c.scenario}/models/{c.variant}_{kind}_r{c.repeat}.json"), md)
    for (scenario, kind), attrs in sorted(result.attributions.items()):
        base = f"{scenario}/attributions/{kind}"
        write_phi_csv(attrs, staging.path(f"{base}_phi.csv"), head)
        write_summary(result.summaries[(scenario, kind)], staging.path(f"{base}_summary.csv"),
                      staging.path(f"{base}_summary.json"), cfg.explain.top_k, head,
                      {"provenance": prov, "scenario": scenario, "model_kind": kind, "variant": MAIN, "repeat": 0})


# --------------------------------------------------------------------------- explain

def cmd_explain(cfg: RunConfig, model_path: str, rows_path: str, limit: int | None = None,
                top_k: int | None = None, out_dir: str | None = None) -> Path:
    model, meta = load_model(model_path)
    want = cfg.config_hash()
    if meta.get("config_hash") != want:
        raise ConfigError(f"{model_path} was trained under config hash {meta.get('config_hash')!r}; "
                          f"the current config hashes to {want!r}")
    matrix, sidecar = read_feature_matrix(rows_path)
    if sidecar.get("dictionary_digest") != meta.get("dictionary_digest"):
        raise ConfigError(f"feature dictionary of {rows_path} does not match the model's")
    model_norm = (meta.get("normalization") or {}).get("fitted_on")
    if matrix.normalization is None or matrix.normalization.fitted_on != model_norm:
        raise DataError(f"{rows_path} was not normalized with the model's training statistics")
    n = len(matrix.patient_ids) if limit is None else min(limit, len(matrix.patient_ids))
    X = matrix.values[:n]
    if np.isnan(X).any():
        raise DataError(f"{rows_path} contains missing values; explain needs imputed rows")
    bg = model.background_means if isinstance(model, LogisticModel) else None
    attrs = explain(model, X, matrix.patient_ids[:n], matrix.dictionary.names, background_means=bg)
    k = top_k or cfg.explain.top_k
    out = Path(out_dir or Path(cfg.output_dir) / "explain")
    stem = Path(model_path).stem
    head = header(cfg)
    staging = Staging(out)
    try:
        write_phi_csv(attrs, staging.path(f"{stem}_phi.csv"), head)
        write_summary(summarize(attrs), staging.path(f"{stem}_summary.csv"), staging.path(f"{stem}_summary.json"),
                      k, head, {"provenance": provenance(cfg), "model": stem, "rows": n})
        staging.publish()
    except BaseException:
        staging.discard()
        raise
    logger.info("explained %d rows with %s; top-%d summary in %s", n, stem, k, out)
    return out


# --------------------------------------------------------------------------- argument handling

def _scenarios(value: str | None):
    if value is None:
        return None
    return list(SCENARIOS) if value == "both" else [value]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="master seed, overrides the config")
    common.add_argument("--scenario", choices=("case1", "case2", "both"), help="scenario selection")
    common.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker processes for evaluation")

    p = argparse.ArgumentParser(prog="hyperk", description="ICU hyperkalemia risk modelling pipeline")
    p.add_argument("--version", action="version", version=f"hyperk {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("synth", parents=[common], help="write a synthetic event-table directory")
    s.add_argument("--out", help="dataset directory (default: config input_dir or ./hyperk_data)")
    r = sub.add_parser("run", parents=[common], help="cohort, features, models, attributions, result table")
    r.add_argument("--input", help="event-table directory (default: config input_dir, else synthesize)")
    r.add_argument("--out", help="output directory (default: config output_dir)")
    e = sub.add_parser("explain", parents=[common], help="Shapley attributions for a saved model")
    e.add_argument("--model", required=True, help="model JSON written by 'run'")
    e.add_argument("--rows", required=True, help="feature CSV written by 'run' (e.g. features_test_r0.csv)")
    e.add_argument("--limit", type=int, help="explain only the first N rows")
    e.add_argument("--top-k", type=int, help="rows in the summary (default: config explain.top_k)")
    e.add_argument("--out", help="output directory (default: <output_dir>/explain)")
    sub.add_parser("validate-config", parents=[common], help="check a config and print its hash")
    return p


def _setup_logging() -> None:
    level = os.environ.get("HYPERK_LOG", "info").lower()
    if level not in LOG_LEVELS:
        level = "info"
    logging.basicConfig(level=LOG_LEVELS[level], format="%(asctime)s %(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        cfg = load_config(args.config).with_overrides(seed=args.seed, scenarios=_scenarios(args.scenario))
        if args.command == "validate-config":
            print(f"config ok: hash={cfg.config_hash()} seed={cfg.seed}")
            print(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
        elif args.command == "synth":
            print(cmd_synth(cfg, args.out))
        elif args.command == "run":
            print(cmd_run(cfg, args.jobs, args.input, args.out))
        else:
            print(cmd_explain(cfg, args.model, args.rows, args.limit, args.top_k, args.out))
        return 0
    except StageFailure as exc:
        logger.error("%s", exc)
        return exc.error.exit_code
    except HyperkError as exc:
        logger.error("%s", exc)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
