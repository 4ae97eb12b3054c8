"""Clinical domain types: lab observations, patient records, CKD staging."""

from __future__ import annotations

import dataclasses
import datetime as dt
import enum
import math
from typing import Optional, Sequence

from nephro.errors import DomainError, ValidationError

EGFR_MAX = 250.0
MIN_OBSERVATIONS = 5

# lower edges of each stage, best stage first
_STAGE_FLOORS = ((90.0, "G1"), (60.0, "G2"), (45.0, "G3a"), (30.0, "G3b"), (15.0, "G4"))


@enum.unique
class CkdStage(enum.Enum):
    G1 = "G1"
    G2 = "G2"
    G3a = "G3a"
    G3b = "G3b"
    G4 = "G4"
    G5 = "G5"

    @property
    def rank(self) -> int:
        return _STAGE_ORDER.index(self)

    def __lt__(self, other: "CkdStage") -> bool:
        if not isinstance(other, CkdStage):
            return NotImplemented
        return self.rank < other.rank

    def __le__(self, other: "CkdStage") -> bool:
        if not isinstance(other, CkdStage):
            return NotImplemented
        return self.rank <= other.rank

    def __gt__(self, other: "CkdStage") -> bool:
        if not isinstance(other, CkdStage):
            return NotImplemented
        return self.rank > other.rank

    def __ge__(self, other: "CkdStage") -> bool:
        if not isinstance(other, CkdStage):
            return NotImplemented
        return self.rank >= other.rank

    @classmethod
    def parse(cls, text: str) -> "CkdStage":
        """Accept 'G3a', 'g3a', 'stage G3a', 'CKD G3a'."""
        cleaned = str(text).strip()
        for prefix in ("ckd", "stage"):
            if cleaned.lower().startswith(prefix):
                cleaned = cleaned[len(prefix):].strip(" :-")
        for stage in cls:
            if stage.value.lower() == cleaned.lower():
                return stage
        raise ValueError(f"unknown CKD stage {text!r}")


_STAGE_ORDER = list(CkdStage)


def ckd_stage(egfr: float) -> CkdStage:
    """KDIGO G-category for an eGFR value; bins are lower-inclusive (60.0 -> G2)."""
    if not (isinstance(egfr, (int, float)) and math.isfinite(egfr)) or egfr <= 0:
        raise DomainError(f"eGFR must be a positive finite number, got {egfr!r}")
    for floor, name in _STAGE_FLOORS:
        if egfr >= floor:
            return CkdStage(name)
    return CkdStage.G5


@dataclasses.dataclass(frozen=True)
class ObservationPoint:
    date: dt.date
    egfr: float
    creatinine: Optional[float] = None
    bun: Optional[float] = None
    uacr: Optional[float] = None


@dataclasses.dataclass(frozen=True)
class PatientRecord:
    id: str
    sex: str  # "male" | "female"
    age_at_baseline: float
    diabetes: bool
    hypertension: bool
    observations: tuple[ObservationPoint, ...]

    def __post_init__(self) -> None:
        # lists are accepted for convenience, stored as tuples
        if not isinstance(self.observations, tuple):
            object.__setattr__(self, "observations", tuple(self.observations))

    @property
    def n_obs(self) -> int:
        return len(self.observations)

    @property
    def dates(self) -> list[dt.date]:
        return [o.date for o in self.observations]

    @property
    def egfr(self) -> list[float]:
        return [o.egfr for o in self.observations]

    def baseline_stage(self) -> CkdStage:
        return ckd_stage(self.observations[0].egfr)


def record_problems(record: PatientRecord) -> list[str]:
    """Every invariant violation in ``record``; empty when valid."""
    problems: list[str] = []
    obs = record.observations
    if record.sex not in ("male", "female"):
        problems.append(f"sex must be 'male' or 'female', got {record.sex!r}")
    if len(obs) < MIN_OBSERVATIONS:
        problems.append(f"too few observations: {len(obs)} < {MIN_OBSERVATIONS}")
    for i, o in enumerate(obs):
        if not isinstance(o.date, dt.date):
            problems.append(f"observation {i}: date is not a calendar date")
        if not (isinstance(o.egfr, (int, float)) and math.isfinite(o.egfr)) or not 0 < o.egfr <= EGFR_MAX:
            problems.append(f"observation {i}: egfr {o.egfr!r} outside (0, {EGFR_MAX:g}]")
    dates = [o.date for o in obs if isinstance(o.date, dt.date)]
    seen: set[dt.date] = set()
    for d in dates:
        if d in seen:
            problems.append(f"duplicate date {d.isoformat()}")
        seen.add(d)
    if any(b < a for a, b in zip(dates, dates[1:])):
        problems.append("observations not sorted by date")
    return problems


def validate_record(record: PatientRecord) -> PatientRecord:
    """Return ``record`` unchanged if valid, else raise with the full violation list."""
    problems = record_problems(record)
    if problems:
        raise ValidationError([f"patient {record.id}: {p}" for p in problems])
    return record


def observed_variables(observations: Sequence[ObservationPoint]) -> list[str]:
    """Variable names present in a history prefix, in prompt order."""
    names = ["eGFR", "age", "sex", "diabetes", "hypertension"]
    if any(o.creatinine is not None for o in observations):
        names.append("creatinine")
    if any(o.bun is not None for o in observations):
        names.append("BUN")
    if any(o.uacr is not None for o in observations):
        names.append("UACR")
    return names
