"""Prompt templates for the four model roles.

Placeholders use ``${name}`` syntax. The evaluator rubric below is an
in-house stand-in: the original rubric wording was never published.
"""

from __future__ import annotations

import dataclasses
import string
from typing import Mapping

from nephro.errors import TemplateError

TEMPLATE_NAMES = ("teacher_interpret", "evaluator_rubric", "student_predict", "student_explain")


def placeholders(body: str) -> list[str]:
    """Placeholder names in order of first appearance."""
    names: list[str] = []
    for m in string.Template.pattern.finditer(body):
        name = m.group("named") or m.group("braced")
        if name and name not in names:
            names.append(name)
    return names


@dataclasses.dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str
    required_placeholders: frozenset[str] = frozenset()
    system: str = ""

    def __post_init__(self) -> None:
        if not self.required_placeholders:
            object.__setattr__(self, "required_placeholders", frozenset(placeholders(self.body)))


def render_template(template: PromptTemplate, bindings: Mapping[str, object]) -> str:
    for name in placeholders(template.body):
        if name in bindings:
            continue
        if name in template.required_placeholders:
            raise TemplateError(f"template {template.name!r}: missing binding for placeholder '{name}'")
        raise TemplateError(f"template {template.name!r}: unknown placeholder '{name}' left in body")
    missing = sorted(template.required_placeholders - set(bindings))
    if missing:
        raise TemplateError(f"template {template.name!r}: missing binding for placeholder '{missing[0]}'")
    return string.Template(template.body).substitute({k: str(v) for k, v in bindings.items()})


TEACHER_SYSTEM = (
    "You are an experienced nephrologist. You read de-identified eGFR trend charts "
    "and describe kidney function trajectories precisely and conservatively."
)

TEACHER_INTERPRET = PromptTemplate(
    name="teacher_interpret",
    system=TEACHER_SYSTEM,
    body="""\
The attached line chart (chart ${chart_index} of ${chart_count} for this patient) shows \
eGFR in mL/min/1.73m² against measurement date. The plotted values are repeated below.

${data_block}

Clinical context:
${tabular_context}

Interpret the chart. Specifically:
1. identify inflection points where the trajectory changes direction;
2. assess the recent trend and estimate its slope in mL/min/1.73m² per month;
3. estimate the short-term change expected at the next measurement;
4. classify current kidney status with the KDIGO CKD G-stage of the last plotted value.

Reply with one fenced JSON object and nothing else:
```json
{"inflection_points": [{"date": "YYYY-MM-DD", "direction": "upturn|downturn"}],
 "recent_trend": "improving|stable|declining",
 "slope_estimate": <number, per month>,
 "short_term_change": {"direction": "up|flat|down", "magnitude_band": "<0-2|2-5|>5"},
 "stage_classification": "G1|G2|G3a|G3b|G4|G5",
 "narrative": "<at most 200 words>"}
```""",
)

EVALUATOR_SYSTEM = (
    "You are a strict clinical reviewer grading chart interpretations written by another model."
)

EVALUATOR_RUBRIC = PromptTemplate(
    name="evaluator_rubric",
    system=EVALUATOR_SYSTEM,
    body="""\
Grade the interpretation of an eGFR trend chart below. The underlying data:

${data_block}

Clinical context:
${tabular_context}

Interpretation under review:
${interpretation_json}

Score each criterion as an integer from 0 (unacceptable) to 5 (excellent):
- clinical_accuracy: trend direction, slope magnitude and CKD stage agree with the data;
- coherence: the narrative is internally consistent and matches the structured fields;
- completeness: inflection points, recent trend, short-term change and stage are all addressed.

Reply with one fenced JSON object:
```json
{"clinical_accuracy": <0-5>, "coherence": <0-5>, "completeness": <0-5>, "rationale": "<text>"}
```""",
)

STUDENT_SYSTEM = (
    "You are a clinical forecasting assistant. You predict a patient's next eGFR "
    "measurement from their history, reasoning step by step before answering."
)

STUDENT_PREDICT = PromptTemplate(
    name="student_predict",
    system=STUDENT_SYSTEM,
    body="""\
The attached chart plots this patient's eGFR history (mL/min/1.73m²).
Data block:
${data_block}

Clinical and laboratory variables:
${covariates}
${teacher_block}${memory_block}
Task: predict the eGFR value measured on ${target_date}.
Think step by step: describe the recent trajectory, weigh the laboratory variables, \
then estimate the next value.

Reply with one fenced JSON object:
```json
{"predicted_egfr": <number>, "reasoning": "<step-by-step reasoning>"}
```""",
)

STUDENT_EXPLAIN = PromptTemplate(
    name="student_explain",
    system=STUDENT_SYSTEM,
    body="""\
You predicted an eGFR of ${predicted_egfr} mL/min/1.73m² for ${target_date}.
Your reasoning was:
${reasoning}

Data block:
${data_block}

Variables observed for this patient: ${observed_variables}.

Explain the prediction with two kinds of abductive reasoning:
- selective items: ground the prediction in observed variables only (use the names listed above);
- creative items: hypothesize plausible factors that are NOT in the record
  (for example medications, diet, intercurrent illness), never an observed variable.
Tie the items together in a short linkage that refers to the predicted value.

Reply with one fenced JSON object:
```json
{"selective_items": [{"variable_name": "<observed name>",
                      "observed_value_or_trend": "<text>",
                      "contribution_direction": "lowers|raises|neutral"}],
 "creative_items": [{"hypothesis_text": "<text>", "flagged_unobserved": true}],
 "linkage": "<text>"}
```""",
)

TEMPLATES: dict[str, PromptTemplate] = {
    t.name: t for t in (TEACHER_INTERPRET, EVALUATOR_RUBRIC, STUDENT_PREDICT, STUDENT_EXPLAIN)
}

REPAIR_PROMPT = (
    "Your previous reply could not be used: {problem}. "
    "Reply again with only the fenced JSON object in the requested format."
)
