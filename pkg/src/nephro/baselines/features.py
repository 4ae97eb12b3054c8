"""Tabular features for the random-forest baseline.

Each row describes a history prefix: demographics, the last three eGFR
values with their spacing, latest labs with missing-value indicators, the
OLS slope over the last four points, and the horizon to the target date.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
from typing import Sequence

import numpy as np

from nephro.baselines.naive import ols_slope
from nephro.domain import ObservationPoint, PatientRecord
from nephro.errors import DomainError

N_LAGS = 3
SLOPE_WINDOW = 4
MIN_TARGET_INDEX = 4  # first observation (0-based) that becomes a training target

FEATURE_NAMES = (
    "age", "sex_flag", "diabetes", "hypertension",
    *(f"egfr_lag{j}" for j in range(1, N_LAGS + 1)),
    *(f"days_since_prev_lag{j}" for j in range(1, N_LAGS + 1)),
    "bun", "bun_missing", "uacr", "uacr_missing", "creatinine", "creatinine_missing",
    "slope_recent", "days_to_target",
)


@dataclasses.dataclass(frozen=True)
class FeatureVector:
    values: tuple[float, ...]
    patient_id: str = ""

    def __post_init__(self) -> None:
        if len(self.values) != len(FEATURE_NAMES):
            raise ValueError(f"expected {len(FEATURE_NAMES)} features, got {len(self.values)}")

    def as_dict(self) -> dict[str, float]:
        return dict(zip(FEATURE_NAMES, self.values))


def _latest(history: Sequence[ObservationPoint], attr: str) -> tuple[float, float]:
    for o in reversed(history):
        v = getattr(o, attr)
        if v is not None:
            return float(v), 0.0
    return 0.0, 1.0


def feature_vector(patient: PatientRecord, history_length: int, target_date: dt.date) -> FeatureVector:
    history = patient.observations[:history_length]
    if len(history) < N_LAGS + 1:
        raise DomainError(f"features need at least {N_LAGS + 1} observations, got {len(history)}")
    lags = [history[-j].egfr for j in range(1, N_LAGS + 1)]
    gaps = [(history[-j].date - history[-j - 1].date).days for j in range(1, N_LAGS + 1)]
    window = history[-SLOPE_WINDOW:]
    days = np.array([(o.date - window[-1].date).days for o in window], dtype=float)
    slope, _ = ols_slope(days, np.array([o.egfr for o in window], dtype=float))
    values = (
        float(patient.age_at_baseline),
        1.0 if patient.sex == "male" else 0.0,
        float(patient.diabetes),
        float(patient.hypertension),
        *map(float, lags),
        *map(float, gaps),
        *_latest(history, "bun"),
        *_latest(history, "uacr"),
        *_latest(history, "creatinine"),
        slope,
        float((target_date - history[-1].date).days),
    )
    return FeatureVector(values, patient.id)


def training_rows(patients: Sequence[PatientRecord]) -> list[tuple[FeatureVector, float]]:
    """One row per observation at index >= 4, predicted from everything before it."""
    rows = []
    for p in patients:
        for i in range(MIN_TARGET_INDEX, p.n_obs):
            rows.append((feature_vector(p, i, p.observations[i].date), float(p.observations[i].egfr)))
    return rows
