"""Seeded synthetic ICU cohorts with a planted hyperkalemia risk signal.

Design constraints, all checked by tests:

* exactly ``round(prevalence * n_patients)`` patients get a confirmed K >= 6
  within 14 days of admission; exclusions are only drawn for the rest, so the
  general-cohort positive count equals that number;
* with every effect size at zero, no day-1 feature carries information about
  either scenario's label. AKI status and timing are drawn independently of
  outcome, and a positive patient with AKI always has the hyperkalemia event
  placed 6h-7d after AKI onset, so AKI-cohort membership does not select on
  outcome timing either;
* planted effects act on day-1 phosphate, admission potassium, fluid balance,
  and vasopressor use. Each continuous risk factor of a positive patient is
  independently in an abnormal regime with probability
  ``abnormal_fraction * scale`` and only then shifted upward by its effect size,
  so risk rises steeply in the high tail rather than linearly. Vasopressor
  log-odds rise by ``effect_vasopressor * scale``. Here
  ``scale = exp(-(onset_day - 1) / signal_decay_days)``, so later events are
  harder to predict from day-1 data.

Every patient draws from its own PCG64 stream derived from ``(seed, index)``,
so output is bit-reproducible for a fixed seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .ingest import (
    DAY,
    HOUR,
    IV_FLUIDS,
    DialysisEvent,
    EventStore,
    FluidEvent,
    LabEvent,
    MedEvent,
    Patient,
    UrineEvent,
    parse_timestamp,
)
from .seeding import rng_for


@dataclass
class SynthConfig:
    n_patients: int = 1000
    prevalence: float = 0.02
    effect_phosphate: float = 3.5       # SD units, applied in the abnormal regime
    effect_potassium: float = 3.5       # SD units, applied in the abnormal regime
    effect_fluid_balance: float = 3.5   # SD units of net balance, abnormal regime
    effect_vasopressor: float = 3.5     # log-odds
    effect_aki: float = 1.0             # log-odds of AKI within 7 days
    abnormal_fraction: float = 0.9      # chance a positive's risk factor is abnormal
    signal_decay_days: float = 10.0     # <= 0 disables decay
    aki_rate: float = 0.3
    exclusion_rate: float = 0.08
    hemolysis_rate: float = 0.02
    start_date: str = "2150-01-01T00:00"

    def __post_init__(self):
        if not 0.0 < self.prevalence < 1.0:
            raise ValueError(f"prevalence must be in (0, 1), got {self.prevalence}")
        if self.n_patients < 10:
            raise ValueError(f"n_patients must be >= 10, got {self.n_patients}")
        if not 0.0 < self.aki_rate < 1.0:
            raise ValueError("aki_rate must be in (0, 1)")
        if not 0.0 <= self.abnormal_fraction <= 1.0:
            raise ValueError("abnormal_fraction must be a probability")
        if not 0.0 <= self.exclusion_rate < 1.0 or not 0.0 <= self.hemolysis_rate <= 1.0:
            raise ValueError("exclusion_rate and hemolysis_rate must be probabilities")

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown synth keys: {sorted(unknown)}")
        return cls(**data)

    @property
    def n_positive(self) -> int:
        return int(round(self.prevalence * self.n_patients))

    @property
    def has_signal(self) -> bool:
        return any(getattr(self, f) != 0 for f in (
            "effect_phosphate", "effect_potassium", "effect_fluid_balance",
            "effect_vasopressor", "effect_aki"))


# analyte -> (sampler(rng) -> value, day-1 missing probability, decimals)
_LAB_DISTS = {
    "creatine_kinase": (lambda r: r.lognormal(math.log(150), 1.0), 0.50, 0),
    "glucose": (lambda r: np.clip(r.normal(140, 40), 40, 600), 0.02, 0),
    "lactate": (lambda r: r.lognormal(math.log(1.6), 0.5), 0.40, 1),
    "ph": (lambda r: np.clip(r.normal(7.38, 0.07), 6.8, 7.7), 0.45, 2),
    "wbc": (lambda r: r.lognormal(math.log(10), 0.4), 0.03, 1),
    "chloride": (lambda r: np.clip(r.normal(104, 5), 80, 130), 0.03, 0),
    "bilirubin": (lambda r: r.lognormal(math.log(0.8), 0.7), 0.35, 1),
    "platelet": (lambda r: np.clip(r.normal(210, 80), 10, 800), 0.03, 0),
    "alt": (lambda r: r.lognormal(math.log(30), 0.8), 0.40, 0),
    "hemoglobin": (lambda r: np.clip(r.normal(10.5, 2.0), 5, 18), 0.03, 1),
}
_PHOS_MEAN, _PHOS_SD, _PHOS_MISSING = 3.5, 0.9, 0.10
_K_MEAN, _K_SD = 4.1, 0.45
_BALANCE_SD = 1080.0  # sd of intake - output

# csv token -> day-1 usage probability
_MED_RATES = {
    "ace_arb": 0.10, "loop_thiazide_diuretic": 0.20, "nsaid": 0.05, "beta_blocker": 0.25,
    "steroid": 0.10, "beta_agonist": 0.10, "k_sparing_diuretic": 0.03,
    "carbonic_anhydrase_inhibitor": 0.01, "digoxin": 0.03, "heparin": 0.40,
    "potassium_chloride": 0.25, "succinylcholine": 0.03, "insulin": 0.25,
    "sodium_bicarbonate": 0.05, "calcium_gluconate": 0.05, "nitroglycerin": 0.05,
    "labetalol": 0.04, "vasopressor": 0.17,
}
_IV_RATES = {"saline": 0.5, "hartmann": 0.15, "plasmalyte": 0.10, "dextrose5": 0.20, "dextrose10": 0.03}

_CREAT_TIMES = [HOUR + 12 * HOUR * j for j in range(20)]  # +1h, +13h, ... ~10 days
_AKI_TIMES = [t for t in _CREAT_TIMES[1:] if t <= 7 * DAY]
_K_TIMES = [13 * HOUR + 12 * HOUR * j for j in range(27)]
_URINE_TIMES = [4 * HOUR * j for j in range(31)]          # 5 days
_ONSET_DAY_WEIGHTS = np.array([0.85 ** d for d in range(14)])
_EXCLUSIONS = ("age", "ckd5_esrd", "end_of_life", "peritoneal_dialysis", "hemodialysis_prior",
               "admission_hyperkalemia")


def _sigmoid(z: float) -> float:
    return 1.0 / (1.0 + math.exp(-z))


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def _minutes(rng: np.random.Generator, lo_h: float, hi_h: float) -> int:
    return int(round(rng.uniform(lo_h, hi_h) * 60))


class _PatientBuilder:
    def __init__(self, cfg: SynthConfig, pid: str, admit: int, rng: np.random.Generator):
        self.cfg = cfg
        self.pid = pid
        self.admit = admit
        self.rng = rng
        self.labs: list[LabEvent] = []
        self.meds: list[MedEvent] = []
        self.fluids: list[FluidEvent] = []
        self.urine: list[UrineEvent] = []
        self.dialysis: list[DialysisEvent] = []

    def lab(self, offset: int, analyte: str, value: float, decimals: int = 2):
        value = max(round(float(value), decimals), 10.0 ** -decimals)
        self.labs.append(LabEvent(self.pid, self.admit + offset, analyte, value))

    def med(self, offset: int, category: str):
        self.meds.append(MedEvent(self.pid, self.admit + offset, category))

    def build(self, positive: bool, exclusion: str | None) -> Patient:
        cfg, rng = self.cfg, self.rng
        age = float(round(np.clip(rng.normal(64, 15), 18, 90), 1))
        sex = "male" if rng.random() < 0.57 else "female"
        weight = None if rng.random() < 0.02 else float(round(np.clip(rng.normal(80, 18), 40, 180), 1))

        # AKI status and timing never look at the outcome beyond the planted effect
        p_aki = _sigmoid(_logit(cfg.aki_rate) + (cfg.effect_aki if positive else 0.0))
        aki_time = None
        if rng.random() < p_aki:
            aki_time = int(_AKI_TIMES[rng.integers(len(_AKI_TIMES))])

        onset = None
        if positive:
            if aki_time is not None:
                onset = aki_time + _minutes(rng, 6.0, 7 * 24 - 1 / 60)
            else:
                day = int(rng.choice(14, p=_ONSET_DAY_WEIGHTS / _ONSET_DAY_WEIGHTS.sum()))
                onset = max(10 * HOUR, day * DAY + _minutes(rng, 0.0, 24.0 - 1 / 60))
                onset = min(onset, 14 * DAY - 1)
        scale = 0.0
        if onset is not None:
            scale = math.exp(-(onset // DAY) / cfg.signal_decay_days) if cfg.signal_decay_days > 0 else 1.0

        self._creatinine_and_urine(aki_time, weight)
        self._day1_labs(scale)
        self._fluids(scale)
        self._meds(scale)
        self._potassium_course(onset)
        if not positive and rng.random() < cfg.hemolysis_rate:
            self._spurious_hemolysis()

        flags = dict(excl_ckd5_esrd=False, excl_eol_24h=False, excl_peritoneal_dialysis=False,
                     excl_hd_prior=False)
        if exclusion == "age":
            age = float(rng.choice([16.0, 17.0, 91.0, 94.0, 97.0]))
        elif exclusion == "ckd5_esrd":
            flags["excl_ckd5_esrd"] = True
        elif exclusion == "end_of_life":
            flags["excl_eol_24h"] = True
        elif exclusion == "peritoneal_dialysis":
            flags["excl_peritoneal_dialysis"] = True
        elif exclusion == "hemodialysis_prior":
            flags["excl_hd_prior"] = True
            self.dialysis.append(DialysisEvent(self.pid, self.admit - _minutes(rng, 24, 240), "hemodialysis"))
        elif exclusion == "admission_hyperkalemia":
            self.lab(-_minutes(rng, 1, 10), "potassium", rng.uniform(6.0, 6.8), 1)
        return Patient(self.pid, self.admit, age, sex, weight, **flags)

    def _creatinine_and_urine(self, aki_time: int | None, weight: float | None):
        rng = self.rng
        base = float(np.clip(rng.lognormal(math.log(0.9), 0.3), 0.4, 1.8))
        factor, stage = 1.0, 0
        if aki_time is not None:
            stage = int(rng.choice([1, 2, 3], p=[0.6, 0.25, 0.15]))
            factor = {1: rng.uniform(1.6, 1.9), 2: rng.uniform(2.1, 2.8), 3: rng.uniform(3.1, 4.0)}[stage]
        recovery = int(rng.integers(3, 8))
        for j, t in enumerate(_CREAT_TIMES):
            level = base
            if aki_time is not None and t >= aki_time:
                k = _CREAT_TIMES.index(aki_time)
                level = base * (factor if j - k < recovery else 1.0 + (factor - 1.0) * 0.5 ** (j - k - recovery + 1))
            self.lab(t, "creatinine", max(0.1, level * (1.0 + rng.normal(0, 0.02))))
        if stage == 3 and rng.random() < 0.25:
            self.dialysis.append(DialysisEvent(self.pid, self.admit + aki_time + _minutes(rng, 4, 24), "crrt"))
        w = weight if weight is not None else 80.0
        low_until = aki_time + 16 * HOUR if aki_time is not None and stage >= 2 else None
        for t in _URINE_TIMES:
            if low_until is not None and aki_time < t <= low_until:
                rate = rng.uniform(0.3, 0.45)
            else:
                rate = rng.uniform(0.7, 1.5)
            self.urine.append(UrineEvent(self.pid, self.admit + t, round(rate * 4 * w, 1)))

    def _shift(self, scale: float) -> float:
        # always consume one draw so the stream layout ignores the effect sizes
        return 1.0 if self.rng.random() < self.cfg.abnormal_fraction * scale else 0.0

    def _day1_labs(self, scale: float):
        cfg, rng = self.cfg, self.rng
        values = {name: (sampler(rng), miss, dec) for name, (sampler, miss, dec) in _LAB_DISTS.items()}
        phos = rng.normal(_PHOS_MEAN, _PHOS_SD) + self._shift(scale) * cfg.effect_phosphate * _PHOS_SD
        values["phosphate"] = (np.clip(phos, 0.8, 12.0), _PHOS_MISSING, 1)
        k = rng.normal(_K_MEAN, _K_SD) + self._shift(scale) * cfg.effect_potassium * _K_SD
        values["potassium"] = (np.clip(k, 2.6, 5.9), 0.0, 1)
        draw = _minutes(rng, 0.5, 3.0)
        for name, (value, miss, dec) in values.items():
            if rng.random() >= miss:
                self.lab(draw, name, value, dec)
            elif rng.random() < 0.4:
                # only a nearby out-of-window draw exists
                when = -_minutes(rng, 1, 11) if rng.random() < 0.5 else _minutes(rng, 25, 47)
                self.lab(when, name, value, dec)

    def _fluids(self, scale: float):
        cfg, rng = self.cfg, self.rng
        intake = max(200.0, rng.normal(2500, 900) + self._shift(scale) * cfg.effect_fluid_balance * _BALANCE_SD)
        output = max(100.0, rng.normal(1500, 600))
        for total, direction in ((intake, "intake"), (output, "output")):
            parts = rng.dirichlet(np.ones(4)) * total
            hours = np.sort(rng.uniform(0, 23.9, size=4))
            for h, v in zip(hours, parts):
                self.fluids.append(FluidEvent(self.pid, self.admit + int(round(h * 60)), direction,
                                              round(float(v), 1)))
            for _ in range(2):  # day-2 records outside the feature window
                self.fluids.append(FluidEvent(self.pid, self.admit + _minutes(rng, 24.5, 47.5), direction,
                                              round(float(rng.uniform(100, 800)), 1)))

    def _meds(self, scale: float):
        cfg, rng = self.cfg, self.rng
        for cat, p in _MED_RATES.items():
            if cat == "vasopressor":
                p = _sigmoid(_logit(p) + cfg.effect_vasopressor * scale)
            if rng.random() < p:
                self.med(_minutes(rng, 0, 23.9), cat)
            if cat != "calcium_gluconate" and rng.random() < 0.1:
                self.med(_minutes(rng, 48, 13 * 24), cat)
        for fluid in IV_FLUIDS:
            if rng.random() < _IV_RATES[fluid]:
                self.med(_minutes(rng, 0, 23.9), fluid)

    def _potassium_course(self, onset: int | None):
        rng = self.rng
        blocked = []
        if onset is not None:
            self.lab(onset, "potassium", rng.uniform(6.0, 7.5), 1)
            confirm_end = onset
            if onset >= 30 * HOUR and rng.random() < 0.5:
                self.med(onset + _minutes(rng, 10 / 60, 1.0), "calcium_gluconate")
                if rng.random() < 0.5:
                    t2 = onset + _minutes(rng, 1.0, 3.0)
                    self.lab(t2, "potassium", np.clip(rng.normal(5.2, 0.3), 4.0, 5.9), 1)
                    confirm_end = t2
            else:
                t2 = onset + _minutes(rng, 0.5, 2.0)
                self.lab(t2, "potassium", rng.uniform(6.0, 7.0), 1)
                confirm_end = t2
            blocked.append((onset - 6 * HOUR, confirm_end + 6 * HOUR))
        for t in _K_TIMES:
            if any(lo <= t <= hi for lo, hi in blocked):
                continue
            self.lab(t, "potassium", np.clip(rng.normal(4.1, 0.35), 3.0, 5.6), 1)

    def _spurious_hemolysis(self):
        rng = self.rng
        t = _minutes(rng, 31, 13 * 24)
        self.lab(t, "potassium", rng.uniform(6.0, 7.0), 1)
        self.lab(t + _minutes(rng, 20 / 60, 1.5), "potassium", np.clip(rng.normal(4.3, 0.3), 3.5, 5.5), 1)


def generate_synthetic(config: SynthConfig, seed: int) -> EventStore:
    """Build a synthetic :class:`EventStore`; identical for identical inputs."""
    n = config.n_patients
    assign = rng_for(seed, "synth", "assign")
    positives = set(assign.choice(n, size=config.n_positive, replace=False).tolist())
    start = parse_timestamp(config.start_date)
    patients, labs, meds, fluids, urine, dialysis = [], [], [], [], [], []
    for i in range(n):
        rng = rng_for(seed, "synth", "patient", i)
        admit = start + int(rng.integers(0, 365 * DAY))
        positive = i in positives
        exclusion = None
        if not positive and rng.random() < config.exclusion_rate:
            exclusion = _EXCLUSIONS[int(rng.integers(len(_EXCLUSIONS)))]
        b = _PatientBuilder(config, f"P{i + 1:06d}", admit, rng)
        patients.append(b.build(positive, exclusion))
        labs += b.labs
        meds += b.meds
        fluids += b.fluids
        urine += b.urine
        dialysis += b.dialysis
    return EventStore(patients, labs=labs, meds=meds, fluids=fluids, urine=urine, dialysis=dialysis)
