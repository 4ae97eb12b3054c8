"""Cohort ingestion, synthetic cohorts, stage-stratified splitting."""

from __future__ import annotations

import csv
import dataclasses
import datetime as dt
import io
import math
import os
import warnings
from collections import defaultdict
from pathlib import Path
from typing import IO, Iterable, Optional, Sequence, Union

import numpy as np

from nephro.domain import (
    EGFR_MAX,
    MIN_OBSERVATIONS,
    CkdStage,
    ObservationPoint,
    PatientRecord,
    record_problems,
)
from nephro.errors import ValidationError

CSV_COLUMNS = (
    "patient_id", "date", "egfr", "creatinine", "bun", "uacr",
    "sex", "age_at_baseline", "diabetes", "hypertension",
)
_OPTIONAL_LABS = ("creatinine", "bun", "uacr")
_SEX_CODES = {"M": "male", "F": "female"}
DAYS_PER_MONTH = 365.25 / 12

CsvSource = Union[str, os.PathLike, IO[str]]


@dataclasses.dataclass(frozen=True)
class Cohort:
    patients: tuple[PatientRecord, ...]
    provenance: str = "ingested"  # or "synthetic(seed=N)"

    def __post_init__(self) -> None:
        if not isinstance(self.patients, tuple):
            object.__setattr__(self, "patients", tuple(self.patients))

    def __len__(self) -> int:
        return len(self.patients)

    def __iter__(self):
        return iter(self.patients)

    @property
    def ids(self) -> list[str]:
        return [p.id for p in self.patients]

    @property
    def n_observations(self) -> int:
        return sum(p.n_obs for p in self.patients)

    def get(self, patient_id: str) -> PatientRecord:
        for p in self.patients:
            if p.id == patient_id:
                return p
        raise KeyError(patient_id)

    def subset(self, ids: Iterable[str]) -> "Cohort":
        wanted = set(ids)
        return Cohort(tuple(p for p in self.patients if p.id in wanted), self.provenance)


def cohort_problems(patients: Sequence[PatientRecord]) -> list[str]:
    problems = []
    seen: set[str] = set()
    for p in patients:
        if p.id in seen:
            problems.append(f"duplicate patient id {p.id}")
        seen.add(p.id)
        problems.extend(f"patient {p.id}: {msg}" for msg in record_problems(p))
    return problems


def make_cohort(patients: Iterable[PatientRecord], provenance: str = "ingested") -> Cohort:
    """Build a cohort, validating every record and id uniqueness."""
    patients = tuple(sorted(patients, key=lambda p: p.id))
    problems = cohort_problems(patients)
    if problems:
        raise ValidationError(problems)
    return Cohort(patients, provenance)


# -- CSV -------------------------------------------------------------------


def _parse_float(text: str, column: str, row: int, optional: bool) -> Optional[float]:
    text = text.strip()
    if text == "":
        if optional:
            return None
        raise ValueError(f"row {row}: empty required value in column '{column}'")
    try:
        value = float(text)
    except ValueError:
        raise ValueError(f"row {row}: cannot parse {column}={text!r} as a number") from None
    if not math.isfinite(value):
        raise ValueError(f"row {row}: non-finite {column}={text!r}")
    return value


def _parse_flag(text: str, column: str, row: int) -> bool:
    text = text.strip()
    if text not in ("0", "1"):
        raise ValueError(f"row {row}: {column} must be 0 or 1, got {text!r}")
    return text == "1"


def load_cohort(source: CsvSource) -> Cohort:
    """Read a cohort CSV (one row per measurement) and validate every record.

    Row numbers in error messages count the header as row 1.
    """
    if isinstance(source, (str, os.PathLike)):
        with open(source, newline="", encoding="utf-8") as fh:
            return _load_rows(fh)
    return _load_rows(source)


def _load_rows(fh: IO[str]) -> Cohort:
    reader = csv.DictReader(fh)
    if reader.fieldnames is None:
        raise ValidationError("cohort CSV has no header row")
    header = [h.strip() for h in reader.fieldnames]
    missing = [c for c in CSV_COLUMNS if c not in header]
    if missing:
        raise ValidationError([f"missing required column '{c}'" for c in missing])
    reader.fieldnames = header

    errors: list[str] = []
    rows_by_pid: dict[str, list[tuple[int, ObservationPoint]]] = defaultdict(list)
    static: dict[str, tuple[tuple, int]] = {}
    for rownum, raw in enumerate(reader, start=2):
        pid = (raw.get("patient_id") or "").strip()
        try:
            if not pid:
                raise ValueError(f"row {rownum}: empty patient_id")
            try:
                date = dt.date.fromisoformat((raw["date"] or "").strip())
            except ValueError:
                raise ValueError(f"row {rownum}: cannot parse date {raw['date']!r}") from None
            egfr = _parse_float(raw["egfr"] or "", "egfr", rownum, optional=False)
            labs = {c: _parse_float(raw[c] or "", c, rownum, optional=True) for c in _OPTIONAL_LABS}
            sex_code = (raw["sex"] or "").strip().upper()
            if sex_code not in _SEX_CODES:
                raise ValueError(f"row {rownum}: sex must be M or F, got {raw['sex']!r}")
            age = _parse_float(raw["age_at_baseline"] or "", "age_at_baseline", rownum, optional=False)
            diabetes = _parse_flag(raw["diabetes"] or "", "diabetes", rownum)
            hypertension = _parse_flag(raw["hypertension"] or "", "hypertension", rownum)
        except ValueError as exc:
            errors.append(f"patient {pid or '?'}: {exc}")
            continue
        key = (_SEX_CODES[sex_code], age, diabetes, hypertension)
        if pid in static and static[pid][0] != key:
            errors.append(
                f"patient {pid}: row {rownum}: demographics differ from row {static[pid][1]}"
            )
            continue
        static.setdefault(pid, (key, rownum))
        rows_by_pid[pid].append((rownum, ObservationPoint(date, egfr, **labs)))

    patients = []
    for pid, rows in rows_by_pid.items():
        rows.sort(key=lambda r: r[1].date)
        sex, age, diabetes, hypertension = static[pid][0]
        record = PatientRecord(pid, sex, age, diabetes, hypertension, tuple(o for _, o in rows))
        first_row = min(r for r, _ in rows)
        errors.extend(f"patient {pid} (first row {first_row}): {msg}" for msg in record_problems(record))
        patients.append(record)
    if errors:
        raise ValidationError(errors)
    return make_cohort(patients, "ingested")


def format_number(value: float) -> str:
    """Canonical CSV float: at most two decimals, no trailing zeros."""
    text = f"{value:.2f}".rstrip("0").rstrip(".")
    return "0" if text in ("-0", "") else text


def write_cohort(cohort: Cohort, dest: Union[str, os.PathLike, IO[str], None] = None) -> str:
    """Write the canonical CSV form; returns the text as well."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for p in sorted(cohort.patients, key=lambda r: r.id):
        sex = "M" if p.sex == "male" else "F"
        for o in sorted(p.observations, key=lambda r: r.date):
            writer.writerow([
                p.id,
                o.date.isoformat(),
                format_number(o.egfr),
                *("" if v is None else format_number(v) for v in (o.creatinine, o.bun, o.uacr)),
                sex,
                format_number(p.age_at_baseline),
                int(p.diabetes),
                int(p.hypertension),
            ])
    text = buf.getvalue()
    if dest is None:
        return text
    if isinstance(dest, (str, os.PathLike)):
        Path(dest).parent.mkdir(parents=True, exist_ok=True)
        Path(dest).write_text(text, encoding="utf-8")
    else:
        dest.write(text)
    return text


# -- synthetic cohorts ------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class SynthConfig:
    """Parameters of the synthetic trajectory model.

    Each patient gets a baseline eGFR drawn from one of ``baseline_egfr``
    ranges (picked with ``baseline_weights``), a monthly slope drawn from
    N(mean, spread), and optionally a single slope change at an interior
    visit. If the noiseless trend would dip below ``trend_floor`` its
    deviation from baseline is scaled down so the minimum sits on the floor,
    which keeps the shape piecewise-linear. Gaussian measurement noise is
    added on top.
    """

    n_patients: int = 50
    obs_per_patient: tuple[int, int] = (8, 14)
    baseline_egfr: tuple[tuple[float, float], ...] = ((60.0, 89.0), (45.0, 59.0), (30.0, 44.0), (16.0, 29.0))
    baseline_weights: tuple[float, ...] = (0.3, 0.3, 0.25, 0.15)
    monthly_slope: tuple[float, float] = (-0.5, 0.4)  # mean, spread
    noise_sigma: float = 1.5
    inflection_probability: float = 0.3
    inflection_slope_change: float = 1.0  # sd of the slope change, per month
    trend_floor: float = 8.0
    visit_interval_days: tuple[int, int] = (60, 120)
    start_date: dt.date = dt.date(2004, 1, 1)
    start_spread_days: int = 3650
    lab_probability: float = 0.85
    seed: int = 0
    id_prefix: str = "SYN"

    def problems(self) -> list[str]:
        out = []
        lo, hi = self.obs_per_patient
        if self.n_patients < 1:
            out.append("n_patients must be >= 1")
        if lo > hi:
            out.append(f"obs_per_patient range empty: {lo} > {hi}")
        if lo < MIN_OBSERVATIONS:
            out.append(f"obs_per_patient minimum {lo} below {MIN_OBSERVATIONS}")
        if not self.baseline_egfr:
            out.append("baseline_egfr has no ranges")
        for a, b in self.baseline_egfr:
            if a > b:
                out.append(f"baseline_egfr range empty: {a} > {b}")
            if a <= 0 or b > EGFR_MAX:
                out.append(f"baseline_egfr range ({a}, {b}) outside (0, {EGFR_MAX:g}]")
        if len(self.baseline_weights) != len(self.baseline_egfr):
            out.append("baseline_weights must match baseline_egfr ranges")
        elif any(w < 0 for w in self.baseline_weights) or sum(self.baseline_weights) <= 0:
            out.append("baseline_weights must be nonnegative with positive sum")
        if self.monthly_slope[1] < 0:
            out.append("monthly_slope spread must be >= 0")
        if self.noise_sigma < 0:
            out.append("noise_sigma must be >= 0")
        if not 0.0 < self.trend_floor < min((a for a, _ in self.baseline_egfr), default=EGFR_MAX):
            out.append("trend_floor must be positive and below every baseline_egfr range")
        if self.inflection_slope_change < 0:
            out.append("inflection_slope_change must be >= 0")
        for name in ("inflection_probability", "lab_probability"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                out.append(f"{name} must lie in [0, 1]")
        vlo, vhi = self.visit_interval_days
        if vlo < 1 or vlo > vhi:
            out.append(f"visit_interval_days range invalid: {self.visit_interval_days}")
        if self.start_spread_days < 0:
            out.append("start_spread_days must be >= 0")
        return out


def _clamp_egfr(value: float) -> float:
    return float(min(max(value, 0.1), EGFR_MAX))


def synth_cohort(config: SynthConfig) -> Cohort:
    """Generate a cohort that is a pure function of ``config``."""
    problems = config.problems()
    if problems:
        raise ValidationError(problems)
    rng = np.random.default_rng(config.seed)
    weights = np.asarray(config.baseline_weights, dtype=float)
    weights = weights / weights.sum()
    slope_mean, slope_spread = config.monthly_slope
    width = len(str(config.n_patients))

    patients = []
    for i in range(config.n_patients):
        n = int(rng.integers(config.obs_per_patient[0], config.obs_per_patient[1] + 1))
        lo, hi = config.baseline_egfr[int(rng.choice(len(weights), p=weights))]
        baseline = float(rng.uniform(lo, hi))
        slope = float(rng.normal(slope_mean, slope_spread)) / DAYS_PER_MONTH
        gaps = rng.integers(config.visit_interval_days[0], config.visit_interval_days[1] + 1, size=n - 1)
        days = np.concatenate([[0], np.cumsum(gaps)]).astype(float)

        trend = baseline + slope * days
        if n >= 5 and rng.random() < config.inflection_probability:
            knot = int(rng.integers(2, n - 2))
            change = float(rng.normal(0.0, config.inflection_slope_change)) / DAYS_PER_MONTH
            after = days > days[knot]
            trend = trend + np.where(after, change * (days - days[knot]), 0.0)
        low = float(trend.min())
        if low < config.trend_floor:
            trend = baseline + (trend - baseline) * ((baseline - config.trend_floor) / (baseline - low))
        noise = rng.normal(0.0, config.noise_sigma, size=n) if config.noise_sigma > 0 else np.zeros(n)
        values = [_clamp_egfr(v) for v in trend + noise]

        start = config.start_date + dt.timedelta(days=int(rng.integers(0, config.start_spread_days + 1)))
        sex = "male" if rng.random() < 0.5 else "female"
        age = float(rng.integers(35, 86))
        diabetes = bool(rng.random() < 0.4)
        hypertension = bool(rng.random() < 0.6)

        obs = []
        for d, egfr in zip(days, values):
            has = rng.random(3) < config.lab_probability
            lab_noise = rng.normal(0.0, 1.0, size=3)
            creat = round(max(0.3, 100.0 / egfr * (1.0 + 0.05 * lab_noise[0])), 2)
            bun = round(max(3.0, 8.0 + 700.0 / egfr + 2.0 * lab_noise[1]), 2)
            uacr = round(float(np.exp(np.log(30.0) + (60.0 - egfr) / 25.0 + 0.4 * lab_noise[2])), 2)
            obs.append(ObservationPoint(
                date=start + dt.timedelta(days=int(d)),
                egfr=egfr,
                creatinine=creat if has[0] else None,
                bun=bun if has[1] else None,
                uacr=uacr if has[2] else None,
            ))
        pid = f"{config.id_prefix}-{i + 1:0{max(width, 3)}d}"
        patients.append(PatientRecord(pid, sex, age, diabetes, hypertension, tuple(obs)))
    return make_cohort(patients, f"synthetic(seed={config.seed})")


# -- splitting --------------------------------------------------------------


def _round_half_up(x: float) -> int:
    # tolerance absorbs products like 0.7 * 5 = 3.4999999999999996
    return int(math.floor(x + 0.5 + 1e-9))


def stratified_split(cohort: Cohort, train_fraction: float, seed: int) -> tuple[Cohort, Cohort]:
    """Patient-level split that keeps the baseline-stage mix in both parts.

    Each stratum (stage of the first observation) contributes
    round-half-up(size * train_fraction) patients to train. A stratum of
    one patient goes to train with a warning.
    """
    if len(cohort) == 0:
        raise ValidationError("cannot split an empty cohort")
    if not 0.0 < train_fraction < 1.0:
        raise ValidationError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    strata: dict[CkdStage, list[str]] = defaultdict(list)
    for p in cohort.patients:
        strata[p.baseline_stage()].append(p.id)

    rng = np.random.default_rng(seed)
    train_ids: list[str] = []
    for stage in sorted(strata):
        ids = sorted(strata[stage])
        if len(ids) == 1:
            warnings.warn(
                f"stratum {stage.value} has a single patient ({ids[0]}); assigned to train",
                stacklevel=2,
            )
            train_ids.extend(ids)
            continue
        order = rng.permutation(len(ids))
        n_train = _round_half_up(len(ids) * train_fraction)
        train_ids.extend(ids[j] for j in order[:n_train])
    train = set(train_ids)
    val_ids = [pid for pid in cohort.ids if pid not in train]
    return cohort.subset(train), cohort.subset(val_ids)


def median_obs_count(cohort: Cohort) -> int:
    """Lower median of per-patient observation counts (always an attained count)."""
    if len(cohort) == 0:
        raise ValidationError("median of an empty cohort")
    counts = sorted(p.n_obs for p in cohort.patients)
    return counts[(len(counts) - 1) // 2]
