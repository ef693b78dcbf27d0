"""Run configuration: one strict JSON document drives every stage."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any

from .clinical import SCENARIOS
from .errors import ConfigError
from .models import MODEL_KINDS
from .models.tuning import MAX_DEPTH_GRID, N_ESTIMATORS_GRID
from .synth import SynthConfig


def _strict(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _positive_int(value, name: str) -> None:
    if not isinstance(value, int) or isinstance(value, bool) or value < 1:
        raise ConfigError(f"{name} must be a positive integer")


@dataclass
class FeatureOptions:
    include_aki_stage: bool = True
    knn_k: int = 3

    def __post_init__(self):
        if not isinstance(self.include_aki_stage, bool):
            raise ConfigError("features.include_aki_stage must be true or false")
        _positive_int(self.knn_k, "features.knn_k")


@dataclass
class ModelOptions:
    kinds: list = field(default_factory=lambda: list(MODEL_KINDS))
    n_estimators_grid: list = field(default_factory=lambda: list(N_ESTIMATORS_GRID))
    max_depth_grid: list = field(default_factory=lambda: list(MAX_DEPTH_GRID))
    tolerance: float = 0.005
    learning_rate: float = 0.1
    l2_leaf_lambda: float = 1.0
    min_child_weight: float = 1.0
    l2_lambda: float = 1e-3
    max_epochs: int = 2000

    def __post_init__(self):
        if not self.kinds or any(k not in MODEL_KINDS for k in self.kinds) or len(set(self.kinds)) != len(self.kinds):
            raise ConfigError(f"models.kinds must be a non-empty subset of {list(MODEL_KINDS)}")
        self.kinds = [k for k in MODEL_KINDS if k in self.kinds]
        for name in ("n_estimators_grid", "max_depth_grid"):
            grid = getattr(self, name)
            if not isinstance(grid, list) or not grid:
                raise ConfigError(f"models.{name} must be a non-empty list")
            for v in grid:
                _positive_int(v, f"models.{name} entries")
            setattr(self, name, sorted(set(grid)))
        if not 0.0 < self.learning_rate <= 1.0:
            raise ConfigError("models.learning_rate must lie in (0, 1]")
        for name in ("tolerance", "l2_leaf_lambda", "min_child_weight", "l2_lambda"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or isinstance(v, bool) or v < 0:
                raise ConfigError(f"models.{name} must be a non-negative number")
        _positive_int(self.max_epochs, "models.max_epochs")


@dataclass
class EvalOptions:
    n_repeats: int = 4
    train_fraction: float = 0.6
    lead_days: list = field(default_factory=lambda: [1, 2, 3, 4])
    ci_level: float = 0.95
    n_bootstrap: int = 1000
    ablation: bool = True

    def __post_init__(self):
        _positive_int(self.n_repeats, "evaluation.n_repeats")
        _positive_int(self.n_bootstrap, "evaluation.n_bootstrap")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("evaluation.train_fraction must lie in (0, 1)")
        if not 0.0 < self.ci_level < 1.0:
            raise ConfigError("evaluation.ci_level must lie in (0, 1)")
        if not self.lead_days or any(not isinstance(d, int) or not 1 <= d <= 14 for d in self.lead_days):
            raise ConfigError("evaluation.lead_days must be integers in 1..14")
        self.lead_days = sorted(set(self.lead_days))
        if not isinstance(self.ablation, bool):
            raise ConfigError("evaluation.ablation must be true or false")


@dataclass
class ExplainOptions:
    max_rows: int = 500
    top_k: int = 10

    def __post_init__(self):
        _positive_int(self.max_rows, "explain.max_rows")
        _positive_int(self.top_k, "explain.top_k")


@dataclass
class RunConfig:
    output_dir: str = "hyperk_out"
    input_dir: str | None = None
    seed: int = 20240101
    scenarios: list = field(default_factory=lambda: list(SCENARIOS))
    features: FeatureOptions = field(default_factory=FeatureOptions)
    models: ModelOptions = field(default_factory=ModelOptions)
    evaluation: EvalOptions = field(default_factory=EvalOptions)
    explain: ExplainOptions = field(default_factory=ExplainOptions)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def __post_init__(self):
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be an integer in [0, 2^64)")
        if not self.scenarios or any(s not in SCENARIOS for s in self.scenarios):
            raise ConfigError(f"scenarios must be a non-empty subset of {list(SCENARIOS)}")
        self.scenarios = [s for s in SCENARIOS if s in self.scenarios]
        if not isinstance(self.output_dir, str) or not self.output_dir:
            raise ConfigError("output_dir must be a non-empty path")
        if self.input_dir is not None and not isinstance(self.input_dir, str):
            raise ConfigError("input_dir must be a path or null")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(_strict_keys(cls, data, "config"))
        sections = {"features": FeatureOptions, "models": ModelOptions, "evaluation": EvalOptions,
                    "explain": ExplainOptions}
        for key, sub in sections.items():
            if key in data:
                data[key] = _strict(sub, data[key], key)
        if "synth" in data:
            if not isinstance(data["synth"], dict):
                raise ConfigError("synth: expected an object")
            try:
                data["synth"] = SynthConfig.from_dict(data["synth"])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"synth: {exc}") from exc
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON form (first 16 hex digits)."""
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    def with_overrides(self, seed: int | None = None, scenarios: list | None = None) -> "RunConfig":
        d = self.to_dict()
        if seed is not None:
            d["seed"] = seed
        if scenarios is not None:
            d["scenarios"] = scenarios
        return RunConfig.from_dict(d)


def _strict_keys(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a JSON object")
    unknown = sorted(set(data) - {f.name for f in fields(cls)})
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    return data


def load_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return RunConfig.from_dict(data)
