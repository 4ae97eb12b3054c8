"""Per-patient prediction sessions for the student model.

A session walks the last few measurements of one patient in date order.
Each step asks for the next eGFR (chain-of-thought, JSON reply), then asks
in a second chained call for an abductive explanation of that prediction.
Finished steps go into a FIFO short-term memory; warm-up steps get their
measured value attached before the next prompt is built.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import json
import logging
import re
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

from nephro.chartgen import ChartCache, render_prefix
from nephro.datablock import fmt_egfr, format_block, indent_free_text, patient_block, tabular_context
from nephro.domain import EGFR_MAX, PatientRecord, observed_variables
from nephro.errors import DomainError, NephroError, ValidationError
from nephro.gateway import BackendConfig, Gateway, make_request
from nephro.parsing import ReplyParseError, as_finite_float, as_list, extract_json_object
from nephro.teacher import Interpretation
from nephro.templates import REPAIR_PROMPT, STUDENT_EXPLAIN, STUDENT_PREDICT, render_template

logger = logging.getLogger(__name__)

PARSE_OK, PARSE_REPAIRED, PARSE_IMPUTED = "ok", "repaired", "imputed"
DOC_OK, DOC_INVALID, DOC_STUB = "ok", "invalid", "stub"
CONTRIBUTIONS = ("lowers", "raises", "neutral")


# -- explanations -----------------------------------------------------------

_ALIASES = {
    "egfr": "eGFR",
    "estimated glomerular filtration rate": "eGFR",
    "glomerular filtration rate": "eGFR",
    "gfr": "eGFR",
    "age": "age",
    "sex": "sex",
    "gender": "sex",
    "diabetes": "diabetes",
    "diabetes mellitus": "diabetes",
    "hypertension": "hypertension",
    "creatinine": "creatinine",
    "serum creatinine": "creatinine",
    "bun": "BUN",
    "blood urea nitrogen": "BUN",
    "urea nitrogen": "BUN",
    "uacr": "UACR",
    "urine albumin creatinine ratio": "UACR",
    "urine albumin to creatinine ratio": "UACR",
    "albumin creatinine ratio": "UACR",
    "albuminuria": "UACR",
}
_TRAILING = ("trend", "trends", "trajectory", "level", "levels", "value", "values", "history", "status")
_CONTRIBUTION_SYNONYMS = {
    "lowers": "lowers", "lower": "lowers", "decrease": "lowers", "decreases": "lowers",
    "negative": "lowers", "down": "lowers",
    "raises": "raises", "raise": "raises", "increase": "raises", "increases": "raises",
    "positive": "raises", "up": "raises",
    "neutral": "neutral", "none": "neutral", "stable": "neutral",
}


def _normalize(name: str) -> str:
    return " ".join(re.sub(r"[^a-z0-9]+", " ", name.lower()).split())


def canonical_variable(name: str) -> Optional[str]:
    """Map a free-form variable mention to a canonical input variable name."""
    if not isinstance(name, str):
        return None
    candidates = [name, *re.findall(r"\(([^)]*)\)", name), re.sub(r"\([^)]*\)", " ", name)]
    for cand in candidates:
        words = _normalize(cand).split()
        while words:
            hit = _ALIASES.get(" ".join(words))
            if hit:
                return hit
            if words[-1] in _TRAILING:
                words = words[:-1]
                continue
            break
    return None


def _mentions(text: str, canonical: str) -> bool:
    norm = f" {_normalize(text)} "
    return any(f" {alias} " in norm for alias, target in _ALIASES.items() if target == canonical)


@dataclasses.dataclass(frozen=True)
class SelectiveItem:
    variable_name: str
    observed_value_or_trend: str
    contribution_direction: str


@dataclasses.dataclass(frozen=True)
class CreativeItem:
    hypothesis_text: str
    flagged_unobserved: bool = True


@dataclasses.dataclass(frozen=True)
class ExplanationDoc:
    selective_items: tuple[SelectiveItem, ...] = ()
    creative_items: tuple[CreativeItem, ...] = ()
    linkage: str = ""
    status: str = DOC_OK
    violations: tuple[str, ...] = ()

    @classmethod
    def stub(cls, reason: str) -> "ExplanationDoc":
        return cls(linkage="", status=DOC_STUB, violations=(reason,))

    @property
    def is_valid(self) -> bool:
        return self.status == DOC_OK

    def to_dict(self) -> dict:
        return {
            "selective_items": [dataclasses.asdict(i) for i in self.selective_items],
            "creative_items": [dataclasses.asdict(i) for i in self.creative_items],
            "linkage": self.linkage,
            "status": self.status,
            "violations": list(self.violations),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ExplanationDoc":
        return cls(
            tuple(SelectiveItem(**i) for i in d.get("selective_items", ())),
            tuple(CreativeItem(**i) for i in d.get("creative_items", ())),
            d.get("linkage", ""),
            d.get("status", DOC_OK),
            tuple(d.get("violations", ())),
        )

    def prompt_text(self) -> str:
        lines = []
        if self.linkage:
            lines.append(f"Explanation: {self.linkage}")
        if self.selective_items:
            lines.append("Observed evidence: " + "; ".join(
                f"{i.variable_name} ({i.observed_value_or_trend}) {i.contribution_direction}"
                for i in self.selective_items))
        if self.creative_items:
            lines.append("Hypotheses: " + "; ".join(i.hypothesis_text for i in self.creative_items))
        if not lines:
            lines.append("Explanation: none recorded")
        return "\n".join(lines)


def _str_field(item: dict, key: str) -> str:
    value = item.get(key, "")
    if value is None:
        return ""
    if isinstance(value, (dict, list)):
        raise ReplyParseError(f"{key} must be text")
    return str(value)


def parse_explanation(text: str) -> ExplanationDoc:
    """Structure of an explanation reply; semantic checks are in validate_explanation."""
    obj = extract_json_object(text)
    selective = []
    for item in as_list(obj.get("selective_items"), "selective_items"):
        if not isinstance(item, dict):
            raise ReplyParseError("selective item must be an object")
        selective.append(SelectiveItem(
            _str_field(item, "variable_name"),
            _str_field(item, "observed_value_or_trend"),
            _str_field(item, "contribution_direction"),
        ))
    creative = []
    for item in as_list(obj.get("creative_items"), "creative_items"):
        if not isinstance(item, dict):
            raise ReplyParseError("creative item must be an object")
        flag = item.get("flagged_unobserved", True)
        creative.append(CreativeItem(_str_field(item, "hypothesis_text"), flag is True))
    if not selective and not creative:
        raise ReplyParseError("explanation has no selective or creative items")
    linkage = obj.get("linkage", "")
    if not isinstance(linkage, str):
        linkage = json.dumps(linkage, sort_keys=True) if isinstance(linkage, (dict, list)) else str(linkage)
    return ExplanationDoc(tuple(selective), tuple(creative), linkage)


def validate_explanation(doc: ExplanationDoc, observed: Sequence[str], outcome_variable: str = "eGFR") -> ExplanationDoc:
    """Attach violations of the selective/creative partition to ``doc``.

    Selective items must name an observed variable. Creative hypotheses
    must not mention any observed variable other than the predicted
    outcome itself.
    """
    observed_set = set(observed)
    problems = []
    items = []
    for i, item in enumerate(doc.selective_items):
        canon = canonical_variable(item.variable_name)
        if canon is None or canon not in observed_set:
            problems.append(f"selective item {i}: variable {item.variable_name!r} was not provided in the input")
        direction = _CONTRIBUTION_SYNONYMS.get(item.contribution_direction.strip().lower())
        if direction is None:
            problems.append(f"selective item {i}: contribution {item.contribution_direction!r} not in {CONTRIBUTIONS}")
            direction = item.contribution_direction
        items.append(dataclasses.replace(item, contribution_direction=direction))
    for i, item in enumerate(doc.creative_items):
        if not item.hypothesis_text.strip():
            problems.append(f"creative item {i}: empty hypothesis")
        if not item.flagged_unobserved:
            problems.append(f"creative item {i}: not flagged as unobserved")
        named = [v for v in observed if v != outcome_variable and _mentions(item.hypothesis_text, v)]
        if named:
            problems.append(f"creative item {i}: names observed variable(s) {named}")
    return dataclasses.replace(
        doc,
        selective_items=tuple(items),
        status=DOC_INVALID if problems else DOC_OK,
        violations=tuple(problems),
    )


# -- memory -----------------------------------------------------------------


@dataclasses.dataclass
class MemoryEntry:
    step_index: int
    prompt_text: str
    predicted_egfr: float
    target_date: dt.date
    history_end: dt.date
    explanation: Optional[ExplanationDoc] = None
    ground_truth: Optional[float] = None

    def __post_init__(self) -> None:
        if not 0 < self.predicted_egfr <= EGFR_MAX:
            raise ValueError(f"predicted_egfr {self.predicted_egfr} outside (0, {EGFR_MAX:g}]")

    def attach_ground_truth(self, value: float) -> None:
        if self.ground_truth is not None:
            raise ValueError(f"ground truth already attached to step {self.step_index}")
        self.ground_truth = float(value)

    def to_dict(self) -> dict:
        return {
            "step_index": self.step_index,
            "predicted_egfr": self.predicted_egfr,
            "target_date": self.target_date.isoformat(),
            "history_end": self.history_end.isoformat(),
            "ground_truth": self.ground_truth,
            "explanation": None if self.explanation is None else self.explanation.to_dict(),
            "prompt_text": self.prompt_text,
        }

    def prompt_text_block(self) -> str:
        truth = (
            f"the measured value was {fmt_egfr(self.ground_truth)} "
            f"(error {fmt_egfr(self.predicted_egfr - self.ground_truth)})"
            if self.ground_truth is not None
            else "the measured value is not yet known"
        )
        head = (
            f"Step {self.step_index}: with measurements up to {self.history_end.isoformat()} you predicted "
            f"{fmt_egfr(self.predicted_egfr)} mL/min/1.73m² for {self.target_date.isoformat()}; {truth}."
        )
        body = self.explanation.prompt_text() if self.explanation is not None else "Explanation: none recorded"
        return head + "\n" + indent_free_text(body)


class ShortTermMemory:
    """Bounded FIFO of finished steps, confined to one session."""

    def __init__(self, capacity: int = 2):
        if capacity < 1:
            raise ValueError("memory capacity must be >= 1")
        self.capacity = capacity
        self._entries: list[MemoryEntry] = []

    @property
    def entries(self) -> list[MemoryEntry]:
        return list(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def add(self, entry: MemoryEntry) -> Optional[MemoryEntry]:
        """Append ``entry``; returns the evicted oldest entry, if any."""
        if self._entries and entry.step_index <= self._entries[-1].step_index:
            raise ValueError("memory entries must arrive in increasing step order")
        self._entries.append(entry)
        if len(self._entries) > self.capacity:
            return self._entries.pop(0)
        return None

    def latest(self) -> Optional[MemoryEntry]:
        return self._entries[-1] if self._entries else None

    def snapshot(self) -> list[dict]:
        return [e.to_dict() for e in self._entries]

    def prompt_block(self) -> str:
        if not self._entries:
            return ""
        lines = ["Short-term memory, your earlier predictions for this patient (oldest first):"]
        lines.extend(indent_free_text(e.prompt_text_block()) for e in self._entries)
        lines.append("Use the measured values above to correct any systematic error in your reasoning.")
        return "\n".join(lines)


# -- prompts ----------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class StudentFlags:
    knowledge_transfer: bool = False
    short_term_memory: bool = False

    @property
    def label(self) -> str:
        if self.knowledge_transfer and self.short_term_memory:
            return "knowledge transfer + short-term memory"
        if self.knowledge_transfer:
            return "knowledge transfer"
        if self.short_term_memory:
            return "zero-shot + short-term memory"
        return "zero-shot"


@dataclasses.dataclass(frozen=True)
class PredictPrompt:
    sections: dict  # placeholder name -> bound text
    text: str
    image: bytes
    history_length: int
    target_date: dt.date
    teacher_prefix: Optional[int]


def match_interpretation(teacher_map: Mapping[int, Interpretation], history_length: int) -> Optional[Interpretation]:
    """Longest teacher prefix not exceeding the history (never a future chart)."""
    usable = [k for k in teacher_map if k <= history_length]
    return teacher_map[max(usable)] if usable else None


def build_predict_prompt(
    patient: PatientRecord,
    history_length: int,
    teacher_interp: Optional[Interpretation],
    memory: Optional[ShortTermMemory],
    flags: StudentFlags,
    cache: Optional[ChartCache] = None,
) -> PredictPrompt:
    if history_length < 2:
        raise DomainError(f"history_length {history_length} < 2: no chart can be drawn")
    if history_length >= patient.n_obs:
        raise DomainError(f"no observation after history_length {history_length}")
    target_date = patient.observations[history_length].date
    teacher_block = ""
    teacher_prefix = None
    if flags.knowledge_transfer and teacher_interp is not None:
        teacher_prefix = teacher_interp.chart_prefix_length
        teacher_block = (
            f"\nChart interpretation from a teacher model (chart of the first {teacher_prefix} measurements):\n"
            + indent_free_text(teacher_interp.prompt_text())
            + "\n"
        )
    memory_block = ""
    if flags.short_term_memory and memory is not None and len(memory):
        memory_block = "\n" + memory.prompt_block() + "\n"
    sections = {
        "data_block": format_block(patient_block(patient, history_length, target_date=target_date)),
        "covariates": tabular_context(patient, history_length),
        "teacher_block": teacher_block,
        "memory_block": memory_block,
        "target_date": target_date.isoformat(),
    }
    text = render_template(STUDENT_PREDICT, sections)
    image = render_prefix(patient, history_length, cache)
    return PredictPrompt(sections, text, image, history_length, target_date, teacher_prefix)


def parse_prediction(text: str) -> tuple[float, str]:
    obj = extract_json_object(text)
    value = as_finite_float(obj.get("predicted_egfr"), "predicted_egfr")
    if not 0 < value <= EGFR_MAX:
        raise ReplyParseError(f"predicted_egfr {value} outside (0, {EGFR_MAX:g}]")
    reasoning = obj.get("reasoning", "")
    return value, reasoning if isinstance(reasoning, str) else json.dumps(reasoning, sort_keys=True)


# -- sessions ---------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class StudentConfig:
    backend: BackendConfig
    flags: StudentFlags = StudentFlags()
    memory_capacity: int = 2
    n_warmup: int = 2
    eval_steps: int = 1  # how many trailing steps are scored
    parse_retries: int = 2
    temperature: float = 0.2
    explain_temperature: float = 0.2

    def __post_init__(self) -> None:
        if self.n_warmup < 0 or not 1 <= self.eval_steps <= self.n_warmup + 1:
            raise ValidationError(
                f"need n_warmup >= 0 and 1 <= eval_steps <= n_warmup + 1, got {self.n_warmup}, {self.eval_steps}"
            )


@dataclasses.dataclass(frozen=True)
class PredictionOutcome:
    step_index: int
    target_date: dt.date
    history_length: int
    predicted_egfr: float
    raw_reply: str
    parse_status: str
    backend_attempts: int
    reasoning: str = ""
    error: str = ""

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["target_date"] = self.target_date.isoformat()
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PredictionOutcome":
        return cls(**{**d, "target_date": dt.date.fromisoformat(d["target_date"])})


@dataclasses.dataclass
class StepRecord:
    outcome: PredictionOutcome
    explanation: ExplanationDoc
    ground_truth: float
    evaluated: bool
    predict_prompt: str
    explain_prompt: str
    teacher_prefix: Optional[int]
    memory_before: list[dict]

    def to_dict(self) -> dict:
        return {
            "step_index": self.outcome.step_index,
            "evaluated": self.evaluated,
            "ground_truth": self.ground_truth,
            "outcome": self.outcome.to_dict(),
            "explanation": self.explanation.to_dict(),
            "teacher_prefix": self.teacher_prefix,
            "predict_prompt": self.predict_prompt,
            "explain_prompt": self.explain_prompt,
            "memory_before": self.memory_before,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "StepRecord":
        return cls(
            outcome=PredictionOutcome.from_dict(d["outcome"]),
            explanation=ExplanationDoc.from_dict(d["explanation"]),
            ground_truth=d["ground_truth"],
            evaluated=d["evaluated"],
            predict_prompt=d["predict_prompt"],
            explain_prompt=d["explain_prompt"],
            teacher_prefix=d.get("teacher_prefix"),
            memory_before=d.get("memory_before", []),
        )


@dataclasses.dataclass
class SessionTranscript:
    patient_id: str
    model_label: str
    flags: StudentFlags
    steps: list[StepRecord]
    split: str = ""

    @property
    def evaluated_steps(self) -> list[StepRecord]:
        return [s for s in self.steps if s.evaluated]

    @property
    def errors(self) -> list[str]:
        return [s.outcome.error for s in self.steps if s.outcome.error]

    def to_dict(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "model_label": self.model_label,
            "split": self.split,
            "flags": dataclasses.asdict(self.flags),
            "method_label": self.flags.label,
            "steps": [s.to_dict() for s in self.steps],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SessionTranscript":
        return cls(
            patient_id=d["patient_id"],
            model_label=d["model_label"],
            flags=StudentFlags(**d["flags"]),
            steps=[StepRecord.from_dict(s) for s in d["steps"]],
            split=d.get("split", ""),
        )

    def save(self, path: Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False), encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "SessionTranscript":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


class Session:
    """State of one patient's prediction session (strictly sequential)."""

    def __init__(
        self,
        patient: PatientRecord,
        teacher_map: Mapping[int, Interpretation],
        config: StudentConfig,
        gateway: Gateway,
        cache: Optional[ChartCache] = None,
    ):
        self.patient = patient
        self.teacher_map = dict(teacher_map)
        self.config = config
        self.gateway = gateway
        self.cache = cache
        self.memory = ShortTermMemory(config.memory_capacity)

    def _last_observed(self, history_length: int) -> float:
        return float(self.patient.observations[history_length - 1].egfr)

    def predict_step(self, history_length: int, step_index: int = 1) -> tuple[PredictionOutcome, PredictPrompt]:
        cfg = self.config
        interp = match_interpretation(self.teacher_map, history_length) if cfg.flags.knowledge_transfer else None
        prompt = build_predict_prompt(self.patient, history_length, interp, self.memory, cfg.flags, self.cache)
        request = make_request(
            STUDENT_PREDICT.name, STUDENT_PREDICT.system, prompt.text, [prompt.image],
            temperature=cfg.temperature,
            request_tag=f"predict:step{step_index}",
        )
        attempts = 0
        raw = ""
        problems: list[str] = []
        try:
            reply = self.gateway.complete(cfg.backend, request)
            attempts += reply.attempt_count
            raw = reply.text
            for round_ in range(cfg.parse_retries + 1):
                try:
                    value, reasoning = parse_prediction(reply.text)
                except ReplyParseError as exc:
                    problems.append(str(exc))
                    if round_ == cfg.parse_retries:
                        break
                    request = request.followed_by(reply.text, REPAIR_PROMPT.format(problem=exc))
                    reply = self.gateway.complete(cfg.backend, request)
                    attempts += reply.attempt_count
                    raw = reply.text
                    continue
                status = PARSE_OK if round_ == 0 else PARSE_REPAIRED
                outcome = PredictionOutcome(
                    step_index, prompt.target_date, history_length, value, raw, status, attempts, reasoning
                )
                return outcome, prompt
            error = f"unparseable after {cfg.parse_retries} re-asks: {problems[-1]}"
        except NephroError as exc:
            error = f"backend error: {exc}"
            logger.warning("student step failed for %s: %s", self.patient.id, exc)
        outcome = PredictionOutcome(
            step_index, prompt.target_date, history_length, self._last_observed(history_length),
            raw, PARSE_IMPUTED, attempts, "", error,
        )
        return outcome, prompt

    def explain_prompt(self, outcome: PredictionOutcome) -> str:
        block = patient_block(
            self.patient, outcome.history_length, target_date=outcome.target_date, predicted=outcome.predicted_egfr
        )
        observed = observed_variables(self.patient.observations[: outcome.history_length])
        return render_template(STUDENT_EXPLAIN, {
            "predicted_egfr": fmt_egfr(outcome.predicted_egfr),
            "target_date": outcome.target_date.isoformat(),
            "reasoning": indent_free_text(outcome.reasoning or "(none given)"),
            "data_block": format_block(block),
            "observed_variables": ", ".join(observed),
        })

    def explain_step(self, outcome: PredictionOutcome) -> tuple[ExplanationDoc, str]:
        if outcome.parse_status == PARSE_IMPUTED:
            return ExplanationDoc.stub("imputed - no explanation"), ""
        text = self.explain_prompt(outcome)
        request = make_request(
            STUDENT_EXPLAIN.name, STUDENT_EXPLAIN.system, text,
            temperature=self.config.explain_temperature,
            request_tag=f"explain:step{outcome.step_index}",
        )
        try:
            reply = self.gateway.complete(self.config.backend, request)
        except NephroError as exc:
            return ExplanationDoc.stub(f"backend error: {exc}"), text
        try:
            doc = parse_explanation(reply.text)
        except ReplyParseError as exc:
            return ExplanationDoc.stub(f"parse failure: {exc}"), text
        observed = observed_variables(self.patient.observations[: outcome.history_length])
        return validate_explanation(doc, observed), text

    def history_lengths(self) -> list[int]:
        n_steps = self.config.n_warmup + 1
        first = self.patient.n_obs - n_steps
        if first < 2:
            raise DomainError(
                f"patient {self.patient.id}: {self.patient.n_obs} observations cannot support {n_steps} steps"
            )
        return list(range(first, self.patient.n_obs))

    def run(self) -> SessionTranscript:
        lengths = self.history_lengths()
        n_steps = len(lengths)
        steps: list[StepRecord] = []
        for step_index, h in enumerate(lengths, start=1):
            memory_before = self.memory.snapshot()
            outcome, prompt = self.predict_step(h, step_index)
            doc, explain_text = self.explain_step(outcome)
            truth = float(self.patient.observations[h].egfr)
            entry = MemoryEntry(
                step_index, prompt.text, outcome.predicted_egfr, outcome.target_date,
                self.patient.observations[h - 1].date, doc,
            )
            if step_index < n_steps:
                entry.attach_ground_truth(truth)
            self.memory.add(entry)
            steps.append(StepRecord(
                outcome=outcome,
                explanation=doc,
                ground_truth=truth,
                evaluated=step_index > n_steps - self.config.eval_steps,
                predict_prompt=prompt.text,
                explain_prompt=explain_text,
                teacher_prefix=prompt.teacher_prefix,
                memory_before=memory_before,
            ))
        return SessionTranscript(self.patient.id, self.config.backend.label, self.config.flags, steps)


def run_patient_session(
    patient: PatientRecord,
    teacher_map: Mapping[int, Interpretation],
    config: StudentConfig,
    gateway: Gateway,
    cache: Optional[ChartCache] = None,
) -> SessionTranscript:
    return Session(patient, teacher_map, config, gateway, cache).run()
