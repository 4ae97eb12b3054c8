"""
One patient through both stages
===============================

The trend oracle stands in for every model role, so this runs offline.
"""

# %%
import sys
import tempfile
from pathlib import Path

from nephro.chartgen import build_series
from nephro.cohort import SynthConfig, median_obs_count, synth_cohort
from nephro.gateway import BackendConfig, Gateway
from nephro.student import StudentConfig, StudentFlags, run_patient_session
from nephro.teacher import TeacherConfig, run_teacher_stage

oracle = BackendConfig("oracle", "trend_oracle", model_name="trend-oracle")
cohort = synth_cohort(SynthConfig(n_patients=10, seed=3))
patient = cohort.patients[0]
gateway = Gateway()

# %%
# Stage 1: k=3 interpretations per chart, the rubric picks one.
series = build_series(patient, median_obs_count(cohort))
interps = run_teacher_stage(series, patient, gateway, TeacherConfig(oracle))
last = interps[max(interps)]
print(last.recent_trend, f"{last.slope_estimate:+.2f}/month", last.stage_classification.value)
print(last.narrative)

# %%
# Stage 2: two warm-up steps fill the memory, the third step is scored.
config = StudentConfig(oracle, StudentFlags(knowledge_transfer=True, short_term_memory=True))
transcript = run_patient_session(patient, interps, config, gateway)
for step in transcript.steps:
    o = step.outcome
    tag = "scored" if step.evaluated else "warm-up"
    print(f"{tag:8s} {o.target_date} predicted {o.predicted_egfr:6.2f} measured {step.ground_truth:6.2f}")

# %%
# The final prompt replays both warm-ups with their measured values.
final = transcript.steps[-1].predict_prompt
start = final.index("Short-term memory")
print(final[start:start + 600])

# %%
# Explanation of the scored step, split into selective and creative items.
doc = transcript.steps[-1].explanation
print("status:", doc.status)
for item in doc.selective_items:
    print("  observed:", item.variable_name, "-", item.observed_value_or_trend)
for item in doc.creative_items:
    print("  hypothesis:", item.hypothesis_text)

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
transcript.save(out / f"{patient.id}.json")
print("transcript saved to", out)
