"""KDIGO AKI staging, hyperkalemia labeling, and scenario cohorts.

Staging thresholds (KDIGO 2012):

    stage 1  creatinine 1.5-1.9x baseline, or a rise >= 0.3 mg/dL within 48h;
             urine < 0.5 mL/kg/h for 6-12h
    stage 2  creatinine 2.0-2.9x baseline; urine < 0.5 mL/kg/h for >= 12h
    stage 3  creatinine >= 3.0x baseline, or >= 4.0 mg/dL with a 48h rise >= 0.3,
             or renal replacement therapy; urine < 0.3 mL/kg/h for >= 24h,
             or anuria for >= 12h

Baseline creatinine is the lowest value in the trailing 7 days (t - 7d, t].
The creatinine and urine components are each evaluated at their own
measurement times and carried forward until the next measurement of the same
kind; the stage at any time is the max of the two carried components and the
RRT flag.
"""

from __future__ import annotations

import bisect
import csv
import logging
import os
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import DataError
from .ingest import DAY, HOUR, EventStore, Patient, UrineEvent, format_timestamp

logger = logging.getLogger(__name__)

BASELINE_WINDOW = 7 * DAY
RISE_WINDOW = 48 * HOUR
URINE_INTERVAL_CAP = 24 * HOUR
NEIGHBOR_WINDOW = 6 * HOUR
HYPERK_THRESHOLD = 6.0
ADMISSION_K_WINDOW = (-12 * HOUR, 1 * HOUR)
LABEL_HORIZON = 14 * DAY
CASE1_AKI_HORIZON = 7 * DAY
CASE1_LABEL_SPAN = 7 * DAY
AGE_RANGE = (18.0, 90.0)

# absorbs binary-float noise in ratio and rise comparisons (e.g. 0.7 - 0.4)
_EPS = 1e-9

SCENARIOS = ("case1", "case2")
EXCLUSION_REASONS = (
    "age", "ckd5_esrd", "end_of_life", "peritoneal_dialysis", "hemodialysis_prior",
    "admission_hyperkalemia", "no_aki_7d",
)


# --------------------------------------------------------------------------- staging

def baseline_creatinine(creatinine_series: Sequence[tuple[int, float]], t: int) -> float | None:
    """Lowest creatinine in (t - 7d, t]; None when the window is empty."""
    vals = [v for (s, v) in creatinine_series if t - BASELINE_WINDOW < s <= t]
    return min(vals) if vals else None


def max_rise_48h(creatinine_series: Sequence[tuple[int, float]], t: int, current: float) -> float:
    """``current`` minus the lowest creatinine in (t - 48h, t], floored at 0."""
    vals = [v for (s, v) in creatinine_series if t - RISE_WINDOW < s <= t]
    return max(0.0, current - min(vals)) if vals else 0.0


def stage_creatinine(baseline: float, current: float, max_rise_48h: float, on_rrt: bool = False) -> int:
    if on_rrt:
        return 3
    if not (baseline > 0 and current > 0 and max_rise_48h >= 0):
        raise ValueError(f"invalid creatinine inputs: baseline={baseline}, current={current}, "
                         f"rise={max_rise_48h}")
    acute = max_rise_48h >= 0.3 - _EPS
    if current >= 3.0 * baseline - _EPS or (current >= 4.0 - _EPS and acute):
        return 3
    if current >= 2.0 * baseline - _EPS:
        return 2
    if current >= 1.5 * baseline - _EPS or acute:
        return 1
    return 0


@dataclass(frozen=True)
class UrineInterval:
    start: int
    end: int
    rate: float  # mL/kg/h
    contiguous: bool  # starts where the previous interval ended


def urine_intervals(urine_events: Iterable[UrineEvent | tuple[int, float]], weight_kg: float) -> list[UrineInterval]:
    """Piecewise-constant output rate implied by a urine series.

    Each measurement's volume is spread evenly over the time since the previous
    measurement, capped at 24h. The first measurement has no known collection
    period and contributes no interval. Same-time measurements are summed.
    """
    pairs = sorted((ev.time, ev.volume_ml) if isinstance(ev, UrineEvent) else tuple(ev) for ev in urine_events)
    merged: list[list] = []
    for t, v in pairs:
        if merged and merged[-1][0] == t:
            merged[-1][1] += v
        else:
            merged.append([t, float(v)])
    out = []
    for i in range(1, len(merged)):
        t, v = merged[i]
        gap = t - merged[i - 1][0]
        span = min(gap, URINE_INTERVAL_CAP)
        rate = v / (span / HOUR) / weight_kg
        out.append(UrineInterval(t - span, t, rate, contiguous=(i > 1 and span == gap)))
    return out


def _urine_stage_from_runs(run05: int, run03: int, run0: int) -> int:
    if run03 >= 24 * HOUR or run0 >= 12 * HOUR:
        return 3
    if run05 >= 12 * HOUR:
        return 2
    if run05 >= 6 * HOUR:
        return 1
    return 0


def stage_urine(urine_events, weight_kg: float, t: int) -> int:
    """Urine-output stage from trailing low-output runs ending at the last
    interval closing at or before ``t``. No data -> 0."""
    if not weight_kg or weight_kg <= 0:
        raise ValueError("weight_kg must be > 0")
    intervals = [iv for iv in urine_intervals(urine_events, weight_kg) if iv.end <= t]
    if not intervals:
        return 0
    runs = []
    for thr, strict in ((0.5, True), (0.3, True), (0.0, False)):
        total = 0
        for iv in reversed(intervals):
            ok = iv.rate < thr if strict else iv.rate == 0.0
            if not ok:
                break
            total += iv.end - iv.start
            if not iv.contiguous:
                break
        runs.append(total)
    return _urine_stage_from_runs(*runs)


@dataclass(frozen=True)
class StageSeries:
    """Step function of AKI stage; stage 0 before the first entry.

    Only change points are stored, so times are strictly increasing and
    consecutive stages differ.
    """

    patient_id: str
    steps: tuple[tuple[int, int], ...] = ()

    def at(self, t: int) -> int:
        i = bisect.bisect_right(self.steps, (t, 4)) - 1
        return self.steps[i][1] if i >= 0 else 0

    def max_over(self, start: int, end: int) -> int:
        """Highest stage held anywhere in [start, end)."""
        best = self.at(start)
        for s, stage in self.steps:
            if start < s < end:
                best = max(best, stage)
        return best

    def first_time_at_least(self, stage: int, start: int, end: int) -> int | None:
        """Earliest time in [start, end] at which stage >= ``stage``."""
        if self.at(start) >= stage:
            return start
        for s, st in self.steps:
            if start < s <= end and st >= stage:
                return s
        return None


def compress_steps(points: Iterable[tuple[int, int]]) -> tuple[tuple[int, int], ...]:
    out = []
    current = 0
    for t, stage in points:
        if stage != current:
            out.append((t, stage))
            current = stage
    return tuple(out)


def compute_stage_series(store: EventStore, patient_id: str) -> StageSeries:
    """Stage at every creatinine, urine and in-stay dialysis time, as a step function."""
    patient = store.patients[patient_id]
    ev = store.events(patient_id)
    return stage_series_from_events(
        patient_id,
        ev.lab_series("creatinine"),
        [(u.time, u.volume_ml) for u in ev.urine],
        [d.time for d in ev.dialysis],
        patient.weight_kg,
        patient.icu_admit_time,
    )


def _dedupe_creatinine(creat: Sequence[tuple[int, float]]) -> list[tuple[int, float, float]]:
    """(time, current, window_min_at_time) with same-time values collapsed:
    current takes the highest, the window minimum sees the lowest."""
    out: list[tuple[int, float, float]] = []
    for t, v in sorted(creat):
        if out and out[-1][0] == t:
            _, hi, lo = out[-1]
            out[-1] = (t, max(hi, v), min(lo, v))
        else:
            out.append((t, v, v))
    return out


def stage_series_from_events(patient_id: str, creatinine: Sequence[tuple[int, float]],
                             urine: Sequence[tuple[int, float]], dialysis_times: Sequence[int],
                             weight_kg: float | None, admit_time: int) -> StageSeries:
    """Single pass over merged event times with monotone-deque window minima."""
    creat = _dedupe_creatinine(creatinine)
    intervals = urine_intervals(urine, weight_kg) if weight_kg else []
    rrt_start = min((t for t in dialysis_times if t >= admit_time), default=None)

    urine_times = sorted({t for t, _ in urine})
    times = sorted({t for t, *_ in creat} | set(urine_times)
                   | ({rrt_start} if rrt_start is not None else set()))

    min7: deque = deque()   # (time, value), values increasing
    min48: deque = deque()
    ci = ui = 0
    creat_stage = urine_stage = 0
    run05 = run03 = run0 = 0
    points = []
    for t in times:
        while ci < len(creat) and creat[ci][0] <= t:
            ct, cur, lo = creat[ci]
            for dq in (min7, min48):
                while dq and dq[-1][1] >= lo:
                    dq.pop()
                dq.append((ct, lo))
            while min7[0][0] <= ct - BASELINE_WINDOW:
                min7.popleft()
            while min48[0][0] <= ct - RISE_WINDOW:
                min48.popleft()
            creat_stage = stage_creatinine(min7[0][1], cur, max(0.0, cur - min48[0][1]))
            ci += 1
        while ui < len(intervals) and intervals[ui].end <= t:
            iv = intervals[ui]
            span = iv.end - iv.start
            keep = iv.contiguous
            run05 = (run05 if keep else 0) + span if iv.rate < 0.5 else 0
            run03 = (run03 if keep else 0) + span if iv.rate < 0.3 else 0
            run0 = (run0 if keep else 0) + span if iv.rate == 0.0 else 0
            urine_stage = _urine_stage_from_runs(run05, run03, run0)
            ui += 1
        rrt = 3 if rrt_start is not None and rrt_start <= t else 0
        points.append((t, max(creat_stage, urine_stage, rrt)))
    return StageSeries(patient_id, compress_steps(points))


# --------------------------------------------------------------------------- labeling

@dataclass(frozen=True)
class OutcomeLabel:
    patient_id: str
    hyperkalemic: bool
    onset_time: int | None = None
    onset_day: int | None = None


def day_index(t: int, admit_time: int) -> int:
    """Day 1 is [admit, admit + 24h)."""
    return (t - admit_time) // DAY + 1


def confirmed_hyperkalemia_times(potassium_events: Sequence[tuple[int, float]],
                                 calcium_gluconate_times: Sequence[int]) -> list[int]:
    """Times of K >= 6 results that survive the hemolysis filter.

    A candidate at t is kept when (i) no other potassium result lies within
    (t - 6h, t + 6h), (ii) other results exist there and all of them are >= 6,
    or (iii) calcium gluconate was given within [t - 6h, t + 6h].
    """
    ks = sorted(potassium_events)
    times = [t for t, _ in ks]
    ca = sorted(calcium_gluconate_times)
    out = []
    for i, (t, v) in enumerate(ks):
        if v < HYPERK_THRESHOLD:
            continue
        lo = bisect.bisect_right(times, t - NEIGHBOR_WINDOW)
        hi = bisect.bisect_left(times, t + NEIGHBOR_WINDOW)
        neighbors = [ks[j][1] for j in range(lo, hi) if j != i]
        if not neighbors or all(n >= HYPERK_THRESHOLD for n in neighbors):
            out.append(t)
            continue
        j = bisect.bisect_left(ca, t - NEIGHBOR_WINDOW)
        if j < len(ca) and ca[j] <= t + NEIGHBOR_WINDOW:
            out.append(t)
    return out


def label_hyperkalemia(potassium_events: Sequence[tuple[int, float]],
                       calcium_gluconate_events: Sequence[int],
                       window_start: int, window_end: int, *,
                       admit_time: int | None = None, patient_id: str = "",
                       start_inclusive: bool = True, end_inclusive: bool = False) -> OutcomeLabel:
    """Earliest confirmed K >= 6 in the window; default window is [start, end)."""
    admit = window_start if admit_time is None else admit_time
    for t in confirmed_hyperkalemia_times(potassium_events, calcium_gluconate_events):
        after_start = t >= window_start if start_inclusive else t > window_start
        before_end = t <= window_end if end_inclusive else t < window_end
        if after_start and before_end:
            return OutcomeLabel(patient_id, True, t, day_index(t, admit))
    return OutcomeLabel(patient_id, False)


# --------------------------------------------------------------------------- cohorts

@dataclass(frozen=True)
class CohortRow:
    patient_id: str
    label: OutcomeLabel
    aki_onset_time: int | None = None
    included: bool = True
    exclusion_reason: str | None = None


@dataclass(frozen=True)
class CohortTable:
    scenario: str
    rows: tuple[CohortRow, ...]

    @property
    def included(self) -> list[CohortRow]:
        return [r for r in self.rows if r.included]

    @property
    def included_ids(self) -> list[str]:
        return [r.patient_id for r in self.rows if r.included]

    def labels(self) -> list[int]:
        return [int(r.label.hyperkalemic) for r in self.rows if r.included]

    def onset_days(self) -> list[int | None]:
        return [r.label.onset_day for r in self.rows if r.included]

    def exclusion_counts(self) -> dict[str, int]:
        counts = {r: 0 for r in EXCLUSION_REASONS}
        for row in self.rows:
            if not row.included:
                counts[row.exclusion_reason] += 1
        return counts

    def write_csv(self, path: str | os.PathLike, header_comment: str | None = None) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scenario", "patient_id", "included", "exclusion_reason", "hyperkalemic",
                        "onset_time", "onset_day", "aki_onset_time"])
            for r in self.rows:
                w.writerow([
                    self.scenario, r.patient_id, int(r.included), r.exclusion_reason or "",
                    int(r.label.hyperkalemic),
                    format_timestamp(r.label.onset_time) if r.label.onset_time is not None else "",
                    r.label.onset_day if r.label.onset_day is not None else "",
                    format_timestamp(r.aki_onset_time) if r.aki_onset_time is not None else "",
                ])


def _has_admission_hyperkalemia(potassium, admit: int) -> bool:
    lo, hi = admit + ADMISSION_K_WINDOW[0], admit + ADMISSION_K_WINDOW[1]
    return any(lo <= t <= hi and v >= HYPERK_THRESHOLD for t, v in potassium)


def exclusion_reason(store: EventStore, patient: Patient) -> str | None:
    """First failed criterion in fixed order, or None when the patient qualifies."""
    if not AGE_RANGE[0] <= patient.age <= AGE_RANGE[1]:
        return "age"
    if patient.excl_ckd5_esrd:
        return "ckd5_esrd"
    if patient.excl_eol_24h:
        return "end_of_life"
    if patient.excl_peritoneal_dialysis:
        return "peritoneal_dialysis"
    ev = store.events(patient.patient_id)
    admit = patient.icu_admit_time
    if patient.excl_hd_prior or any(d.modality == "hemodialysis" and d.time < admit for d in ev.dialysis):
        return "hemodialysis_prior"
    if _has_admission_hyperkalemia(ev.lab_series("potassium"), admit):
        return "admission_hyperkalemia"
    return None


def aki_onset(series: StageSeries, admit_time: int, horizon: int = CASE1_AKI_HORIZON) -> int | None:
    """First time in [admit, admit + horizon] with stage >= 1."""
    return series.first_time_at_least(1, admit_time, admit_time + horizon)


def build_cohort(store: EventStore, scenario: str,
                 stage_cache: dict[str, StageSeries] | None = None) -> CohortTable:
    """One row per patient in the store, included or excluded with a reason."""
    if scenario not in SCENARIOS:
        raise DataError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")
    rows = []
    for pid, patient in store.patients.items():
        admit = patient.icu_admit_time
        ev = store.events(pid)
        potassium = ev.lab_series("potassium")
        calcium = ev.med_times("calcium_gluconate")
        reason = exclusion_reason(store, patient)
        if reason is not None:
            rows.append(CohortRow(pid, OutcomeLabel(pid, False), None, False, reason))
            continue
        if scenario == "case2":
            label = label_hyperkalemia(potassium, calcium, admit, admit + LABEL_HORIZON,
                                       admit_time=admit, patient_id=pid)
            rows.append(CohortRow(pid, label))
            continue
        if stage_cache is not None and pid in stage_cache:
            series = stage_cache[pid]
        else:
            series = compute_stage_series(store, pid)
            if stage_cache is not None:
                stage_cache[pid] = series
        onset = aki_onset(series, admit)
        if onset is None:
            rows.append(CohortRow(pid, OutcomeLabel(pid, False), None, False, "no_aki_7d"))
            continue
        label = label_hyperkalemia(potassium, calcium, onset, onset + CASE1_LABEL_SPAN,
                                   admit_time=admit, patient_id=pid,
                                   start_inclusive=False, end_inclusive=True)
        if label.hyperkalemic and label.onset_time >= admit + LABEL_HORIZON:
            label = OutcomeLabel(pid, False)
        rows.append(CohortRow(pid, label, onset))
    table = CohortTable(scenario, tuple(rows))
    n_inc = len(table.included)
    logger.info("%s cohort: %d included of %d, %d positive; exclusions %s", scenario, n_inc,
                len(rows), sum(table.labels()), table.exclusion_counts())
    return table


def write_stage_series_csv(series: Iterable[StageSeries], path: str | os.PathLike,
                           header_comment: str | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "time", "stage"])
        for s in series:
            for t, stage in s.steps:
                w.writerow([s.patient_id, format_timestamp(t), stage])
