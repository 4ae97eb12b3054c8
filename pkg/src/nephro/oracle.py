"""Deterministic stand-in model driven by the prompt's data block.

It answers every template in the exact reply contract a real model is
asked to follow, which makes whole-pipeline runs reproducible offline.
Predictions are linear extrapolations in days from the last two points.
"""

from __future__ import annotations

import json
import statistics

from nephro.datablock import DataBlock, fmt_egfr, parse_block
from nephro.domain import ckd_stage
from nephro.errors import OracleError
from nephro.gateway import ChatRequest, ModelReply

DAYS_PER_MONTH = 365.25 / 12
_STABLE_BAND = 0.25  # mL/min/1.73m² per month


def _fenced(obj: dict) -> str:
    return "```json\n" + json.dumps(obj, sort_keys=True) + "\n```"


def _last_slope_per_day(block: DataBlock) -> float:
    (d1, y1), (d2, y2) = block.rows[-2:]
    days = (d2 - d1).days
    if days <= 0:
        raise OracleError("DATA rows must have strictly increasing dates")
    return (y2 - y1) / days


def extrapolate(block: DataBlock) -> float:
    if block.target_date is None:
        raise OracleError("predict prompt has no TARGET line")
    d2, y2 = block.rows[-1]
    return y2 + _last_slope_per_day(block) * (block.target_date - d2).days


def _trend_word(slope_month: float) -> str:
    if slope_month > _STABLE_BAND:
        return "improving"
    if slope_month < -_STABLE_BAND:
        return "declining"
    return "stable"


def _interpretation(block: DataBlock) -> dict:
    slope_month = _last_slope_per_day(block) * DAYS_PER_MONTH
    inflections = []
    rows = block.rows
    for (d0, y0), (d1, y1), (d2, y2) in zip(rows, rows[1:], rows[2:]):
        before, after = y1 - y0, y2 - y1
        if before < 0 < after:
            inflections.append({"date": d1.isoformat(), "direction": "upturn"})
        elif before > 0 > after:
            inflections.append({"date": d1.isoformat(), "direction": "downturn"})
    gaps = [(b[0] - a[0]).days for a, b in zip(rows, rows[1:])]
    next_change = slope_month / DAYS_PER_MONTH * statistics.median(gaps)
    band = "0-2" if abs(next_change) < 2 else "2-5" if abs(next_change) <= 5 else ">5"
    direction = "flat" if abs(next_change) < 0.5 else ("up" if next_change > 0 else "down")
    last = rows[-1][1]
    stage = ckd_stage(last).value
    trend = _trend_word(slope_month)
    return {
        "inflection_points": inflections,
        "recent_trend": trend,
        "slope_estimate": round(slope_month, 4),
        "short_term_change": {"direction": direction, "magnitude_band": band},
        "stage_classification": stage,
        "narrative": (
            f"Across {len(rows)} measurements the eGFR is {trend} at about "
            f"{slope_month:.2f} mL/min/1.73m² per month, last value {fmt_egfr(last)} "
            f"(stage {stage}), with {len(inflections)} change(s) of direction."
        ),
    }


_LAB_NAMES = ("creatinine", "BUN", "UACR")


def _explanation(block: DataBlock) -> dict:
    if block.predicted is None:
        raise OracleError("explain prompt has no PREDICTED line")
    slope = _last_slope_per_day(block)
    covariates = dict(block.covariates)
    selective = [{
        "variable_name": "eGFR",
        "observed_value_or_trend": f"last {fmt_egfr(block.rows[-1][1])}, {_trend_word(slope * DAYS_PER_MONTH)}",
        "contribution_direction": "lowers" if slope < 0 else "raises" if slope > 0 else "neutral",
    }]
    for name in _LAB_NAMES:
        if name in covariates:
            selective.append({
                "variable_name": name,
                "observed_value_or_trend": f"latest {covariates[name]}",
                "contribution_direction": "neutral",
            })
    for flag in ("diabetes", "hypertension"):
        if covariates.get(flag) == "1":
            selective.append({
                "variable_name": flag,
                "observed_value_or_trend": "present",
                "contribution_direction": "lowers",
            })
    return {
        "selective_items": selective,
        "creative_items": [
            {"hypothesis_text": "possible NSAID use (not in record)", "flagged_unobserved": True},
            {"hypothesis_text": "possible reduced fluid intake before the visit (not in record)",
             "flagged_unobserved": True},
        ],
        "linkage": (
            f"Continuing the most recent slope gives the predicted {fmt_egfr(block.predicted)} "
            f"mL/min/1.73m²; the hypotheses could push the value lower."
        ),
    }


def trend_oracle_reply(request: ChatRequest) -> ModelReply:
    """Answer ``request`` from its data block; raises OracleError if unreadable."""
    block = parse_block(request.text)
    template = request.template
    if template == "student_predict":
        value = extrapolate(block)
        body = {"predicted_egfr": value, "reasoning": "Linear extrapolation of the last two measurements."}
    elif template == "teacher_interpret":
        body = _interpretation(block)
    elif template == "evaluator_rubric":
        body = {"clinical_accuracy": 5, "coherence": 5, "completeness": 5, "rationale": "oracle: maximum scores"}
    elif template == "student_explain":
        body = _explanation(block)
    else:
        raise OracleError(f"trend oracle cannot answer template {template!r}")
    return ModelReply(_fenced(body), "stop", 0.0, 1)
