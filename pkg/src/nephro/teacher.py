"""Chart interpretation by a teacher model, rubric scoring, best-candidate selection."""

from __future__ import annotations

import dataclasses
import datetime as dt
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

from nephro.chartgen import Chart, ChartSeries
from nephro.datablock import format_block, patient_block, tabular_context
from nephro.domain import CkdStage, PatientRecord, ckd_stage
from nephro.errors import NephroError
from nephro.gateway import BackendConfig, ChatRequest, Gateway, make_request
from nephro.parsing import ReplyParseError, as_finite_float, as_list, as_text, extract_json_object
from nephro.templates import EVALUATOR_RUBRIC, REPAIR_PROMPT, TEACHER_INTERPRET, render_template

logger = logging.getLogger(__name__)

TRENDS = ("improving", "stable", "declining")
DIRECTIONS = ("upturn", "downturn")
CHANGE_DIRECTIONS = ("up", "flat", "down")
MAX_NARRATIVE_WORDS = 200
DAYS_PER_MONTH = 365.25 / 12


@dataclasses.dataclass(frozen=True)
class RubricScore:
    clinical_accuracy: int
    coherence: int
    completeness: int
    rationale: str = ""

    def __post_init__(self) -> None:
        for name in ("clinical_accuracy", "coherence", "completeness"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or not 0 <= v <= 5:
                raise ValueError(f"{name} must be an integer in [0, 5], got {v!r}")

    @property
    def total(self) -> int:
        return self.clinical_accuracy + self.coherence + self.completeness

    def to_dict(self) -> dict:
        return {**dataclasses.asdict(self), "total": self.total}

    @classmethod
    def from_dict(cls, d: dict) -> "RubricScore":
        return cls(d["clinical_accuracy"], d["coherence"], d["completeness"], d.get("rationale", ""))


ZERO_SCORE = RubricScore(0, 0, 0, "evaluator parse failure")


@dataclasses.dataclass(frozen=True)
class Interpretation:
    chart_prefix_length: int
    inflection_points: tuple[tuple[dt.date, str], ...]
    recent_trend: str
    slope_estimate: float  # mL/min/1.73m² per month
    short_term_change: tuple[str, str]  # direction, magnitude band
    stage_classification: CkdStage
    narrative: str
    degraded: bool = False
    score: Optional[RubricScore] = None
    notes: tuple[str, ...] = ()

    def stage_consistent(self, last_egfr: float) -> bool:
        return self.stage_classification == ckd_stage(last_egfr)

    def to_dict(self) -> dict:
        return {
            "chart_prefix_length": self.chart_prefix_length,
            "inflection_points": [{"date": d.isoformat(), "direction": k} for d, k in self.inflection_points],
            "recent_trend": self.recent_trend,
            "slope_estimate": self.slope_estimate,
            "short_term_change": {"direction": self.short_term_change[0], "magnitude_band": self.short_term_change[1]},
            "stage_classification": self.stage_classification.value,
            "narrative": self.narrative,
            "degraded": self.degraded,
            "score": None if self.score is None else self.score.to_dict(),
            "notes": list(self.notes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Interpretation":
        interp = _interpretation_from_obj(d, int(d["chart_prefix_length"]))
        score = d.get("score")
        return dataclasses.replace(
            interp,
            degraded=bool(d.get("degraded", False)),
            score=None if score is None else RubricScore.from_dict(score),
            notes=tuple(d.get("notes", ())),
        )

    def prompt_text(self) -> str:
        """Compact rendering embedded in student prompts (no JSON noise)."""
        points = ", ".join(f"{d.isoformat()} ({k})" for d, k in self.inflection_points) or "none"
        return (
            f"Recent trend: {self.recent_trend}, about {self.slope_estimate:.2f} mL/min/1.73m² per month.\n"
            f"Inflection points: {points}.\n"
            f"Expected short-term change: {self.short_term_change[0]} ({self.short_term_change[1]}).\n"
            f"CKD stage at last measurement: {self.stage_classification.value}.\n"
            f"Summary: {self.narrative}"
        )


def _interpretation_from_obj(obj: dict, prefix_length: int) -> Interpretation:
    points = []
    for item in as_list(obj.get("inflection_points"), "inflection_points"):
        if not isinstance(item, dict):
            raise ReplyParseError("inflection point must be an object")
        direction = as_text(item.get("direction"), "direction").strip().lower()
        if direction not in DIRECTIONS:
            raise ReplyParseError(f"inflection direction {direction!r} not in {DIRECTIONS}")
        try:
            date = dt.date.fromisoformat(as_text(item.get("date"), "date").strip())
        except ValueError:
            raise ReplyParseError(f"bad inflection date {item.get('date')!r}") from None
        points.append((date, direction))
    trend = as_text(obj.get("recent_trend"), "recent_trend").strip().lower()
    if trend not in TRENDS:
        raise ReplyParseError(f"recent_trend {trend!r} not in {TRENDS}")
    slope = as_finite_float(obj.get("slope_estimate"), "slope_estimate")
    change = obj.get("short_term_change")
    if not isinstance(change, dict):
        raise ReplyParseError("short_term_change must be an object")
    change_dir = as_text(change.get("direction"), "short_term_change.direction").strip().lower()
    if change_dir not in CHANGE_DIRECTIONS:
        raise ReplyParseError(f"short_term_change.direction {change_dir!r} not in {CHANGE_DIRECTIONS}")
    band = as_text(change.get("magnitude_band"), "short_term_change.magnitude_band").strip()
    try:
        stage = CkdStage.parse(as_text(obj.get("stage_classification"), "stage_classification"))
    except ValueError as exc:
        raise ReplyParseError(str(exc)) from None
    words = as_text(obj.get("narrative"), "narrative", required=False).split()
    narrative = " ".join(words[:MAX_NARRATIVE_WORDS])
    return Interpretation(prefix_length, tuple(points), trend, slope, (change_dir, band), stage, narrative)


def parse_interpretation(text: str, prefix_length: int) -> Interpretation:
    return _interpretation_from_obj(extract_json_object(text), prefix_length)


def parse_rubric(text: str) -> RubricScore:
    obj = extract_json_object(text)
    values = []
    for name in ("clinical_accuracy", "coherence", "completeness"):
        v = as_finite_float(obj.get(name), name)
        if v != int(v) or not 0 <= v <= 5:
            raise ReplyParseError(f"{name} must be an integer in [0, 5], got {v}")
        values.append(int(v))
    rationale = obj.get("rationale", "")
    return RubricScore(*values, rationale=rationale if isinstance(rationale, str) else str(rationale))


def degraded_interpretation(chart: Chart, notes: Sequence[str] = ()) -> Interpretation:
    """Programmatic fallback: last-segment slope sign plus staging."""
    (d1, y1), (d2, y2) = chart.spec.points[-2:]
    slope = (y2 - y1) / max((d2 - d1).days, 1) * DAYS_PER_MONTH
    trend = "improving" if slope > 0.25 else "declining" if slope < -0.25 else "stable"
    direction = {"improving": "up", "declining": "down", "stable": "flat"}[trend]
    stage = ckd_stage(y2)
    return Interpretation(
        chart_prefix_length=chart.prefix_length,
        inflection_points=(),
        recent_trend=trend,
        slope_estimate=round(slope, 4),
        short_term_change=(direction, "unknown"),
        stage_classification=stage,
        narrative=f"Degraded interpretation: eGFR {trend}, last value {y2:.2f} (stage {stage.value}).",
        degraded=True,
        notes=tuple(notes),
    )


@dataclasses.dataclass(frozen=True)
class TeacherConfig:
    backend: BackendConfig
    evaluator: Optional[BackendConfig] = None  # defaults to the teacher backend
    k: int = 3
    temperature: float = 0.7
    evaluator_temperature: float = 0.0
    evaluator_sees_image: bool = True
    parse_retries: int = 1
    fan_out: bool = True

    @property
    def evaluator_backend(self) -> BackendConfig:
        return self.evaluator or self.backend


@dataclasses.dataclass
class CandidateSet:
    candidates: list[Interpretation]
    failures: list[str]

    @property
    def degraded(self) -> bool:
        return len(self.candidates) == 1 and self.candidates[0].degraded


def _one_candidate(
    gateway: Gateway, config: TeacherConfig, request: ChatRequest, prefix_length: int
) -> tuple[Optional[Interpretation], list[str]]:
    reply = gateway.complete(config.backend, request)
    problems = []
    for attempt in range(config.parse_retries + 1):
        try:
            return parse_interpretation(reply.text, prefix_length), problems
        except ReplyParseError as exc:
            problems.append(f"sample {request.sample_index} attempt {attempt + 1}: {exc}")
        if attempt == config.parse_retries:
            break
        try:
            reply = gateway.complete(
                config.backend, request.followed_by(reply.text, REPAIR_PROMPT.format(problem=problems[-1]))
            )
        except NephroError as exc:
            problems.append(f"sample {request.sample_index} repair call failed: {exc}")
            break
    return None, problems


def interpret_chart(
    gateway: Gateway,
    chart: Chart,
    data_block: str,
    tabular: str,
    config: TeacherConfig,
    chart_index: int = 1,
    chart_count: int = 1,
) -> CandidateSet:
    """Sample ``config.k`` interpretations; falls back to a degraded one if all fail."""
    if config.k < 1:
        raise ValueError("k must be >= 1")
    text = render_template(TEACHER_INTERPRET, {
        "chart_index": chart_index,
        "chart_count": chart_count,
        "data_block": data_block,
        "tabular_context": tabular,
    })
    requests = [
        make_request(
            TEACHER_INTERPRET.name, TEACHER_INTERPRET.system, text, [chart.image],
            temperature=config.temperature,
            request_tag=f"teach:prefix_{chart.prefix_length}:s{i}",
            sample_index=i,
        )
        for i in range(config.k)
    ]
    if config.fan_out and config.k > 1:
        with ThreadPoolExecutor(max_workers=config.k) as pool:
            results = list(pool.map(lambda r: _one_candidate(gateway, config, r, chart.prefix_length), requests))
    else:
        results = [_one_candidate(gateway, config, r, chart.prefix_length) for r in requests]

    candidates, failures = [], []
    for interp, problems in results:
        if interp is None:
            failures.append(problems[-1])
            logger.warning("teacher candidate failed for prefix %d: %s", chart.prefix_length, problems[-1])
        else:
            candidates.append(interp)
    if not candidates:
        candidates = [degraded_interpretation(chart, failures)]
    return CandidateSet(candidates, failures)


def apply_stage_override(score: RubricScore, candidate: Interpretation, last_egfr: float) -> RubricScore:
    """Cap clinical_accuracy at 1 when the stated stage contradicts the last value."""
    if candidate.stage_consistent(last_egfr) or score.clinical_accuracy <= 1:
        return score
    return dataclasses.replace(
        score,
        clinical_accuracy=1,
        rationale=(score.rationale + " [stage override: classification contradicts last eGFR]").strip(),
    )


def score_interpretation(
    gateway: Gateway,
    candidate: Interpretation,
    chart: Chart,
    data_block: str,
    tabular: str,
    config: TeacherConfig,
) -> RubricScore:
    text = render_template(EVALUATOR_RUBRIC, {
        "data_block": data_block,
        "tabular_context": tabular,
        "interpretation_json": json.dumps(
            {k: v for k, v in candidate.to_dict().items() if k not in ("score", "notes", "degraded")},
            sort_keys=True,
        ),
    })
    images = [chart.image] if config.evaluator_sees_image else []
    request = make_request(
        EVALUATOR_RUBRIC.name, EVALUATOR_RUBRIC.system, text, images,
        temperature=config.evaluator_temperature,
        request_tag=f"eval:prefix_{chart.prefix_length}",
    )
    reply = gateway.complete(config.evaluator_backend, request)
    try:
        score = parse_rubric(reply.text)
    except ReplyParseError:
        score = ZERO_SCORE
    last_egfr = chart.spec.points[-1][1]
    return apply_stage_override(score, candidate, last_egfr)


def select_best_index(scores: Sequence[RubricScore]) -> int:
    """Argmax by total, then clinical_accuracy, then lowest index."""
    if not scores:
        raise ValueError("no candidates to select from")
    return min(range(len(scores)), key=lambda i: (-scores[i].total, -scores[i].clinical_accuracy, i))


def select_best(scored: Sequence[tuple[Interpretation, RubricScore]]) -> Interpretation:
    if not scored:
        raise ValueError("no candidates to select from")
    best = select_best_index([s for _, s in scored])
    interp, score = scored[best]
    return dataclasses.replace(interp, score=score)


def run_teacher_stage(
    series: ChartSeries, patient: PatientRecord, gateway: Gateway, config: TeacherConfig
) -> dict[int, Interpretation]:
    """One selected interpretation per chart, processed in ascending prefix order."""
    out: dict[int, Interpretation] = {}
    for idx, chart in enumerate(series.charts, start=1):
        k = chart.prefix_length
        block = format_block(patient_block(patient, k))
        tabular = tabular_context(patient, k)
        try:
            cands = interpret_chart(gateway, chart, block, tabular, config, idx, series.m_p)
        except NephroError as exc:
            logger.error("teacher failed on %s prefix %d: %s", patient.id, k, exc)
            out[k] = degraded_interpretation(chart, [f"teacher call failed: {exc}"])
            continue
        if cands.degraded:
            out[k] = cands.candidates[0]
            continue
        try:
            scored = [(c, score_interpretation(gateway, c, chart, block, tabular, config)) for c in cands.candidates]
        except NephroError as exc:
            logger.error("evaluator failed on %s prefix %d: %s", patient.id, k, exc)
            scored = [(c, ZERO_SCORE) for c in cands.candidates]
        best = select_best(scored)
        out[k] = dataclasses.replace(best, notes=best.notes + tuple(cands.failures))
    return out


def teacher_path(root: Path, patient_id: str, prefix_length: int) -> Path:
    return Path(root) / patient_id / f"prefix_{prefix_length}.json"


def save_teacher_map(root: Path, patient_id: str, interps: dict[int, Interpretation]) -> None:
    for k, interp in sorted(interps.items()):
        path = teacher_path(root, patient_id, k)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(interp.to_dict(), indent=2, sort_keys=True), encoding="utf-8")


def load_teacher_map(root: Path, patient_id: str) -> dict[int, Interpretation]:
    out = {}
    folder = Path(root) / patient_id
    if not folder.is_dir():
        return out
    for path in folder.glob("prefix_*.json"):
        interp = Interpretation.from_dict(json.loads(path.read_text(encoding="utf-8")))
        out[interp.chart_prefix_length] = interp
    return dict(sorted(out.items()))
