"""Clinical event tables: types, CSV loading/validation, and CSV writing.

Six files make up a dataset directory::

    patients.csv   patient_id,icu_admit_time,age,sex,weight_kg,excl_ckd5_esrd,
                   excl_eol_24h,excl_peritoneal_dialysis,excl_hd_prior
    labs.csv       patient_id,time,analyte,value
    meds.csv       patient_id,time,category
    fluids.csv     patient_id,time,direction,volume_ml
    urine.csv      patient_id,time,volume_ml
    dialysis.csv   patient_id,time,modality

Timestamps are ISO-8601 and are held internally as integer minutes since the
Unix epoch (naive timestamps are read as UTC). All window arithmetic downstream
is done on those integers.
"""

from __future__ import annotations

import calendar
import csv
import logging
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping

from .errors import IngestError

logger = logging.getLogger(__name__)

MINUTE = 1
HOUR = 60
DAY = 24 * HOUR

LAB_ANALYTES = (
    "potassium", "creatinine", "phosphate", "creatine_kinase", "glucose", "lactate",
    "ph", "wbc", "chloride", "bilirubin", "platelet", "alt", "hemoglobin",
)

# (csv token, feature column name) for the medication categories.
MEDICATION_CATEGORIES = (
    ("ace_arb", "med_ace_yn"),
    ("loop_thiazide_diuretic", "med_loop_yn"),
    ("nsaid", "med_nsaid_yn"),
    ("beta_blocker", "med_beta_yn"),
    ("steroid", "med_steroids_yn"),
    ("beta_agonist", "med_beta_ag_yn"),
    ("k_sparing_diuretic", "med_k_sparing_yn"),
    ("carbonic_anhydrase_inhibitor", "med_carbonic_yn"),
    ("digoxin", "med_dig_yn"),
    ("heparin", "med_hep_yn"),
    ("potassium_chloride", "med_pot_chl_yn"),
    ("succinylcholine", "med_succ_yn"),
    ("insulin", "med_ins_yn"),
    ("sodium_bicarbonate", "med_sod_bic_yn"),
    ("calcium_gluconate", "med_cal_yn"),
    ("nitroglycerin", "med_nitrog_yn"),
    ("labetalol", "med_labet_yn"),
    ("vasopressor", "med_vasop_yn"),
)
IV_FLUIDS = ("saline", "hartmann", "plasmalyte", "dextrose5", "dextrose10")
MED_TOKENS = tuple(tok for tok, _ in MEDICATION_CATEGORIES) + IV_FLUIDS

SEXES = ("male", "female")
FLUID_DIRECTIONS = ("intake", "output")
DIALYSIS_MODALITIES = ("hemodialysis", "crrt")

PATIENT_FIELDS = (
    "patient_id", "icu_admit_time", "age", "sex", "weight_kg", "excl_ckd5_esrd",
    "excl_eol_24h", "excl_peritoneal_dialysis", "excl_hd_prior",
)
FILE_FIELDS = {
    "patients.csv": PATIENT_FIELDS,
    "labs.csv": ("patient_id", "time", "analyte", "value"),
    "meds.csv": ("patient_id", "time", "category"),
    "fluids.csv": ("patient_id", "time", "direction", "volume_ml"),
    "urine.csv": ("patient_id", "time", "volume_ml"),
    "dialysis.csv": ("patient_id", "time", "modality"),
}
OPTIONAL_FIELDS = {"weight_kg"}

_EPOCH = datetime(1970, 1, 1)


def parse_timestamp(text: str) -> int:
    """ISO-8601 text -> integer minutes since epoch (seconds are truncated)."""
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        secs = calendar.timegm(dt.timetuple())
    else:
        secs = int(dt.timestamp())
    return secs // 60


def format_timestamp(minutes: int) -> str:
    return (_EPOCH + timedelta(minutes=int(minutes))).isoformat(timespec="minutes")


@dataclass(frozen=True, slots=True)
class Patient:
    patient_id: str
    icu_admit_time: int
    age: float
    sex: str
    weight_kg: float | None = None
    excl_ckd5_esrd: bool = False
    excl_eol_24h: bool = False
    excl_peritoneal_dialysis: bool = False
    excl_hd_prior: bool = False


@dataclass(frozen=True, slots=True)
class LabEvent:
    patient_id: str
    time: int
    analyte: str
    value: float


@dataclass(frozen=True, slots=True)
class MedEvent:
    patient_id: str
    time: int
    category: str


@dataclass(frozen=True, slots=True)
class FluidEvent:
    patient_id: str
    time: int
    direction: str
    volume_ml: float


@dataclass(frozen=True, slots=True)
class UrineEvent:
    patient_id: str
    time: int
    volume_ml: float


@dataclass(frozen=True, slots=True)
class DialysisEvent:
    patient_id: str
    time: int
    modality: str


@dataclass(frozen=True)
class PatientEvents:
    """Time-sorted events for one patient."""

    labs: tuple[LabEvent, ...] = ()
    meds: tuple[MedEvent, ...] = ()
    fluids: tuple[FluidEvent, ...] = ()
    urine: tuple[UrineEvent, ...] = ()
    dialysis: tuple[DialysisEvent, ...] = ()
    _by_analyte: Mapping[str, tuple[tuple[int, float], ...]] = field(default=None, repr=False, compare=False)
    _by_category: Mapping[str, tuple[int, ...]] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        by_analyte: dict[str, list[tuple[int, float]]] = {}
        for ev in self.labs:
            by_analyte.setdefault(ev.analyte, []).append((ev.time, ev.value))
        by_cat: dict[str, list[int]] = {}
        for ev in self.meds:
            by_cat.setdefault(ev.category, []).append(ev.time)
        object.__setattr__(self, "_by_analyte", MappingProxyType({k: tuple(v) for k, v in by_analyte.items()}))
        object.__setattr__(self, "_by_category", MappingProxyType({k: tuple(v) for k, v in by_cat.items()}))

    def lab_series(self, analyte: str) -> tuple[tuple[int, float], ...]:
        """(time, value) pairs for one analyte, sorted by time."""
        return self._by_analyte.get(analyte, ())

    def med_times(self, category: str) -> tuple[int, ...]:
        return self._by_category.get(category, ())


_EMPTY_EVENTS = PatientEvents()


class EventStore:
    """Immutable, validated collection of patients and their events.

    Patients keep their file order; every per-patient event list is sorted by
    time (stable, so equal timestamps keep file order).
    """

    def __init__(self, patients: Iterable[Patient], labs=(), meds=(), fluids=(), urine=(), dialysis=()):
        pats: dict[str, Patient] = {}
        for p in patients:
            if p.patient_id in pats:
                raise IngestError(f"duplicate patient_id {p.patient_id!r}", file="patients.csv")
            pats[p.patient_id] = p
        self._patients = MappingProxyType(pats)

        grouped: dict[str, dict[str, list]] = {pid: {} for pid in pats}
        for kind, events in (("labs", labs), ("meds", meds), ("fluids", fluids),
                             ("urine", urine), ("dialysis", dialysis)):
            for ev in events:
                bucket = grouped.get(ev.patient_id)
                if bucket is None:
                    raise IngestError(f"orphan patient_id {ev.patient_id!r} not in patients.csv",
                                      file=f"{kind}.csv")
                bucket.setdefault(kind, []).append(ev)
        self._events = MappingProxyType({
            pid: PatientEvents(**{k: tuple(sorted(v, key=lambda e: e.time)) for k, v in kinds.items()})
            if kinds else _EMPTY_EVENTS
            for pid, kinds in grouped.items()
        })

    @property
    def patients(self) -> Mapping[str, Patient]:
        return self._patients

    @property
    def patient_ids(self) -> list[str]:
        return list(self._patients)

    def events(self, patient_id: str) -> PatientEvents:
        try:
            return self._events[patient_id]
        except KeyError:
            raise KeyError(f"unknown patient_id {patient_id!r}") from None

    def row_counts(self) -> dict[str, int]:
        counts = {"patients.csv": len(self._patients)}
        for kind in ("labs", "meds", "fluids", "urine", "dialysis"):
            counts[f"{kind}.csv"] = sum(len(getattr(ev, kind)) for ev in self._events.values())
        return counts

    def __len__(self) -> int:
        return len(self._patients)


@dataclass
class SchemaConfig:
    """Per-file column renames: ``columns[file][canonical_name] = header_in_file``."""

    columns: dict[str, dict[str, str]] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: Mapping | None) -> "SchemaConfig":
        if not data:
            return cls()
        unknown = set(data) - {"columns"}
        if unknown:
            raise ValueError(f"unknown schema keys: {sorted(unknown)}")
        cols = dict(data.get("columns") or {})
        for fname, mapping in cols.items():
            if fname not in FILE_FIELDS:
                raise ValueError(f"schema override for unknown file {fname!r}")
            bad = set(mapping) - set(FILE_FIELDS[fname])
            if bad:
                raise ValueError(f"schema override for {fname} names unknown fields {sorted(bad)}")
        return cls(columns=cols)

    def header_for(self, fname: str, canonical: str) -> str:
        return self.columns.get(fname, {}).get(canonical, canonical)


class _RowReader:
    """Reads one CSV and converts cells with file/line/column error context."""

    def __init__(self, path: Path, schema: SchemaConfig):
        self.path = path
        self.fname = path.name
        self.schema = schema

    def rows(self):
        with open(self.path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise IngestError("empty file (no header)", file=self.fname) from None
            positions = {}
            for canonical in FILE_FIELDS[self.fname]:
                name = self.schema.header_for(self.fname, canonical)
                if name not in header:
                    if canonical in OPTIONAL_FIELDS:
                        continue
                    raise IngestError(f"missing column {name!r}", file=self.fname, line=1)
                positions[canonical] = header.index(name)
            width = len(header)
            for row in reader:
                line = reader.line_num
                if not row:
                    continue
                if len(row) != width:
                    raise IngestError(f"expected {width} fields, found {len(row)}", file=self.fname, line=line)
                yield line, {k: row[i] for k, i in positions.items()}

    def fail(self, line: int, column: str, message: str):
        raise IngestError(message, file=self.fname, line=line, column=column)

    def pid(self, line, cells) -> str:
        v = cells["patient_id"].strip()
        if not v:
            self.fail(line, "patient_id", "empty patient_id")
        return v

    def time(self, line, cells, column="time") -> int:
        try:
            return parse_timestamp(cells[column])
        except (ValueError, TypeError):
            self.fail(line, column, f"bad timestamp {cells[column]!r}")

    def number(self, line, cells, column) -> float:
        try:
            v = float(cells[column])
        except ValueError:
            self.fail(line, column, f"not a number: {cells[column]!r}")
        if not math.isfinite(v):
            self.fail(line, column, f"non-finite value {cells[column]!r}")
        return v

    def token(self, line, cells, column, allowed) -> str:
        v = cells[column].strip()
        if v not in allowed:
            self.fail(line, column, f"unknown {column} token {v!r}")
        return v

    def boolean(self, line, cells, column) -> bool:
        v = cells[column].strip().lower()
        if v in ("true", "1", "yes", "t"):
            return True
        if v in ("false", "0", "no", "f", ""):
            return False
        self.fail(line, column, f"not a boolean: {cells[column]!r}")


def _read_patients(r: _RowReader) -> list[Patient]:
    out = []
    for line, c in r.rows():
        age = r.number(line, c, "age")
        if age < 0:
            r.fail(line, "age", f"negative age {age}")
        weight = None
        if c.get("weight_kg", "").strip():
            weight = r.number(line, c, "weight_kg")
            if weight <= 0:
                r.fail(line, "weight_kg", f"weight must be > 0, got {weight}")
        if not c["icu_admit_time"].strip():
            r.fail(line, "icu_admit_time", "missing icu_admit_time")
        out.append(Patient(
            patient_id=r.pid(line, c),
            icu_admit_time=r.time(line, c, "icu_admit_time"),
            age=age,
            sex=r.token(line, c, "sex", SEXES),
            weight_kg=weight,
            excl_ckd5_esrd=r.boolean(line, c, "excl_ckd5_esrd"),
            excl_eol_24h=r.boolean(line, c, "excl_eol_24h"),
            excl_peritoneal_dialysis=r.boolean(line, c, "excl_peritoneal_dialysis"),
            excl_hd_prior=r.boolean(line, c, "excl_hd_prior"),
        ))
    seen = set()
    for p in out:
        if p.patient_id in seen:
            raise IngestError(f"duplicate patient_id {p.patient_id!r}", file=r.fname)
        seen.add(p.patient_id)
    return out


def _read_events(r: _RowReader, known: set[str]) -> list:
    out = []
    fname = r.fname
    for line, c in r.rows():
        pid = r.pid(line, c)
        if pid not in known:
            r.fail(line, "patient_id", f"orphan patient_id {pid!r} not in patients.csv")
        t = r.time(line, c)
        if fname == "labs.csv":
            analyte = r.token(line, c, "analyte", LAB_ANALYTES)
            value = r.number(line, c, "value")
            if analyte == "ph":
                if not 6.5 <= value <= 8.0:
                    r.fail(line, "value", f"pH {value} outside [6.5, 8.0]")
            elif value <= 0:
                r.fail(line, "value", f"{analyte} value must be > 0, got {value}")
            out.append(LabEvent(pid, t, analyte, value))
        elif fname == "meds.csv":
            out.append(MedEvent(pid, t, r.token(line, c, "category", MED_TOKENS)))
        elif fname == "fluids.csv":
            direction = r.token(line, c, "direction", FLUID_DIRECTIONS)
            vol = r.number(line, c, "volume_ml")
            if vol < 0:
                r.fail(line, "volume_ml", f"negative volume {vol}")
            out.append(FluidEvent(pid, t, direction, vol))
        elif fname == "urine.csv":
            vol = r.number(line, c, "volume_ml")
            if vol < 0:
                r.fail(line, "volume_ml", f"negative volume {vol}")
            out.append(UrineEvent(pid, t, vol))
        elif fname == "dialysis.csv":
            out.append(DialysisEvent(pid, t, r.token(line, c, "modality", DIALYSIS_MODALITIES)))
    return out


def load_event_store(dir_path: str | os.PathLike, schema_config: SchemaConfig | None = None) -> EventStore:
    """Load and validate the six CSV tables in ``dir_path``.

    Raises:
        IngestError: on a missing file, malformed row, unknown enum token or
            orphan patient_id. The message names file, line and column.
    """
    d = Path(dir_path)
    schema = schema_config or SchemaConfig()
    for fname in FILE_FIELDS:
        if not (d / fname).is_file():
            raise IngestError("missing file", file=fname)
    patients = _read_patients(_RowReader(d / "patients.csv", schema))
    known = {p.patient_id for p in patients}
    tables = {}
    for fname in ("labs.csv", "meds.csv", "fluids.csv", "urine.csv", "dialysis.csv"):
        tables[fname[:-4]] = _read_events(_RowReader(d / fname, schema), known)
    store = EventStore(patients, **tables)
    counts = store.row_counts()
    logger.info("loaded %s: %s", d, ", ".join(f"{k}={v}" for k, v in counts.items()))
    missing_weight = sum(1 for p in patients if p.weight_kg is None)
    if missing_weight:
        logger.warning("%d patient(s) without weight_kg; urine-output staging skipped for them", missing_weight)
    return store


def _fmt_float(v: float) -> str:
    return repr(float(v))


def _fmt_bool(v: bool) -> str:
    return "true" if v else "false"


def write_event_store(store: EventStore, dir_path: str | os.PathLike) -> dict[str, int]:
    """Write ``store`` as the six canonical CSV files; returns row counts."""
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    rows: dict[str, list[list[str]]] = {f: [] for f in FILE_FIELDS}
    for pid, p in store.patients.items():
        rows["patients.csv"].append([
            pid, format_timestamp(p.icu_admit_time), _fmt_float(p.age), p.sex,
            "" if p.weight_kg is None else _fmt_float(p.weight_kg),
            _fmt_bool(p.excl_ckd5_esrd), _fmt_bool(p.excl_eol_24h),
            _fmt_bool(p.excl_peritoneal_dialysis), _fmt_bool(p.excl_hd_prior),
        ])
        ev = store.events(pid)
        for e in ev.labs:
            rows["labs.csv"].append([pid, format_timestamp(e.time), e.analyte, _fmt_float(e.value)])
        for e in ev.meds:
            rows["meds.csv"].append([pid, format_timestamp(e.time), e.category])
        for e in ev.fluids:
            rows["fluids.csv"].append([pid, format_timestamp(e.time), e.direction, _fmt_float(e.volume_ml)])
        for e in ev.urine:
            rows["urine.csv"].append([pid, format_timestamp(e.time), _fmt_float(e.volume_ml)])
        for e in ev.dialysis:
            rows["dialysis.csv"].append([pid, format_timestamp(e.time), e.modality])
    for fname, body in rows.items():
        with open(d / fname, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(FILE_FIELDS[fname])
            w.writerows(body)
    return {f: len(b) for f, b in rows.items()}
