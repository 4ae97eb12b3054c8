"""Machine-readable data block embedded in every prompt.

Format, one record per line::

    DATA 2020-01-01 50.0
    DATA 2020-02-01 48.0
    COVARIATES age=63 sex=male diabetes=1 hypertension=0 BUN=28.5
    TARGET 2020-03-01
    PREDICTED 46.13

DATA lines carry full float precision (shortest round-trip repr) so that
a parser can reproduce computations exactly. TARGET appears in predict
and explain prompts, PREDICTED only in explain prompts. Any other line is
ignored by the parser, which is why embedded free text is indented.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import math
from typing import Mapping, Optional, Sequence

from nephro.errors import OracleError

_KEYWORDS = ("DATA", "COVARIATES", "TARGET", "PREDICTED")


@dataclasses.dataclass(frozen=True)
class DataBlock:
    rows: tuple[tuple[dt.date, float], ...]
    covariates: tuple[tuple[str, str], ...] = ()
    target_date: Optional[dt.date] = None
    predicted: Optional[float] = None

    def covariate_names(self) -> list[str]:
        return [k for k, _ in self.covariates]


def fmt_egfr(value: float) -> str:
    """Human-facing eGFR text used in prompts and reports."""
    return f"{value:.2f}"


def format_block(block: DataBlock) -> str:
    lines = [f"DATA {d.isoformat()} {float(v)!r}" for d, v in block.rows]
    if block.covariates:
        lines.append("COVARIATES " + " ".join(f"{k}={v}" for k, v in block.covariates))
    if block.target_date is not None:
        lines.append(f"TARGET {block.target_date.isoformat()}")
    if block.predicted is not None:
        lines.append(f"PREDICTED {float(block.predicted)!r}")
    return "\n".join(lines)


def indent_free_text(text: str, prefix: str = "  ") -> str:
    """Indent text so no line can be mistaken for a data-block record."""
    return "\n".join(prefix + line for line in str(text).splitlines())


def parse_block(text: str) -> DataBlock:
    """Read the data block back out of arbitrary prompt text."""
    rows: list[tuple[dt.date, float]] = []
    covariates: list[tuple[str, str]] = []
    target = None
    predicted = None
    for lineno, line in enumerate(str(text).splitlines(), start=1):
        head, _, rest = line.partition(" ")
        if head not in _KEYWORDS:
            continue
        fields = rest.split()
        try:
            if head == "DATA":
                if len(fields) != 2:
                    raise ValueError("expected 'DATA <date> <egfr>'")
                value = float(fields[1])
                if not math.isfinite(value):
                    raise ValueError("non-finite eGFR")
                rows.append((dt.date.fromisoformat(fields[0]), value))
            elif head == "COVARIATES":
                for item in fields:
                    name, eq, val = item.partition("=")
                    if not eq or not name:
                        raise ValueError(f"bad covariate item {item!r}")
                    covariates.append((name, val))
            elif head == "TARGET":
                target = dt.date.fromisoformat(fields[0])
            elif head == "PREDICTED":
                predicted = float(fields[0])
        except (ValueError, IndexError) as exc:
            raise OracleError(f"data block line {lineno}: {exc}") from None
    if len(rows) < 2:
        raise OracleError(f"data block has {len(rows)} DATA rows, need at least 2")
    return DataBlock(tuple(rows), tuple(covariates), target, predicted)


def make_covariates(items: Mapping[str, object] | Sequence[tuple[str, object]]) -> tuple[tuple[str, str], ...]:
    pairs = items.items() if isinstance(items, Mapping) else items
    out = []
    for k, v in pairs:
        if v is None:
            continue
        if isinstance(v, bool):
            v = int(v)
        if isinstance(v, float):
            v = f"{v:g}"
        out.append((str(k), str(v).replace(" ", "_")))
    return tuple(out)


def latest_labs(observations) -> dict[str, Optional[float]]:
    """Most recent non-missing creatinine, BUN and UACR in ``observations``."""
    out: dict[str, Optional[float]] = {"creatinine": None, "BUN": None, "UACR": None}
    for o in observations:
        for name, value in (("creatinine", o.creatinine), ("BUN", o.bun), ("UACR", o.uacr)):
            if value is not None:
                out[name] = value
    return out


def patient_block(patient, history_length: int, target_date: Optional[dt.date] = None,
                  predicted: Optional[float] = None) -> DataBlock:
    """Data block for the first ``history_length`` observations of ``patient``."""
    obs = patient.observations[:history_length]
    covariates = {
        "age": patient.age_at_baseline,
        "sex": patient.sex,
        "diabetes": patient.diabetes,
        "hypertension": patient.hypertension,
        **latest_labs(obs),
    }
    return DataBlock(
        rows=tuple((o.date, float(o.egfr)) for o in obs),
        covariates=make_covariates(covariates),
        target_date=target_date,
        predicted=predicted,
    )


def _lab(value: Optional[float]) -> str:
    return "NA" if value is None else f"{value:.2f}"


def tabular_context(patient, history_length: int) -> str:
    """Readable demographics and per-visit labs for a history prefix."""
    obs = patient.observations[:history_length]
    yes_no = {True: "yes", False: "no"}
    lines = [
        f"Sex: {patient.sex}; age at first visit: {patient.age_at_baseline:g}; "
        f"diabetes: {yes_no[bool(patient.diabetes)]}; hypertension: {yes_no[bool(patient.hypertension)]}",
        "Visits (eGFR mL/min/1.73m², creatinine mg/dL, BUN mg/dL, UACR mg/g):",
    ]
    for o in obs:
        lines.append(
            f"  {o.date.isoformat()}: eGFR {fmt_egfr(o.egfr)}, creatinine {_lab(o.creatinine)}, "
            f"BUN {_lab(o.bun)}, UACR {_lab(o.uacr)}"
        )
    return "\n".join(lines)
