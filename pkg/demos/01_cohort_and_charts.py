"""
Synthetic cohort and prefix charts
==================================

Generate a seeded cohort, split it by baseline stage and render the
chart series the teacher model reads.
"""

# %%
# A 50-patient cohort with the default trajectory model.
import sys
import tempfile
from collections import Counter
from pathlib import Path

from nephro.chartgen import build_series, write_series
from nephro.cohort import SynthConfig, median_obs_count, stratified_split, synth_cohort
from nephro.domain import ckd_stage

cohort = synth_cohort(SynthConfig(seed=42))
print(len(cohort), "patients,", cohort.n_observations, "observations")

# %%
# Stage mix at the first visit, and the 70/30 split that preserves it.
print(Counter(ckd_stage(p.observations[0].egfr).value for p in cohort))
train, val = stratified_split(cohort, 0.7, seed=0)
print("train", len(train), "validation", len(val))

# %%
# Every patient gets M_p = min(M, N-1) charts, M being the cohort median count.
m = median_obs_count(cohort)
patient = cohort.patients[0]
series = build_series(patient, m)
print(f"M={m}; {patient.id} has {patient.n_obs} visits -> prefixes {series.prefix_lengths}")

# %%
# Charts are plain PNG files, one per prefix.
out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
paths = write_series(series, out / "charts")
print("wrote", len(paths), "charts under", paths[0].parent)
