"""
Ablation grid and report
========================

Four flag cells for one student plus the three baselines, rendered as
the results table, trajectory plots and an example explanation card.
"""

# %%
import sys
import tempfile
import warnings
from pathlib import Path

from nephro.baselines import ForestConfig
from nephro.cohort import SynthConfig, synth_cohort
from nephro.gateway import BackendConfig
from nephro.harness import BaselineSettings, RunConfig, execute, render_report, render_table_md
from nephro.teacher import TeacherConfig

warnings.simplefilter("ignore")  # single-patient strata warn on small cohorts
oracle = BackendConfig("oracle", "trend_oracle", model_name="trend-oracle")
cohort = synth_cohort(SynthConfig(n_patients=20, seed=8))

# %%
config = RunConfig(cohort, (oracle,), TeacherConfig(oracle),
                   baselines=BaselineSettings(forest=ForestConfig(n_trees=50)))
result = execute(config)
print(render_table_md(result.rows))

# %%
# With noisy data the oracle is just another two-point extrapolator, so
# every cell scores the same; real backends are where the flags matter.
out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
written = render_report(result.rows, result.transcripts, out, cohort, result.baselines.predictions)
print(len(written), "files under", out)
print((out / "report.md").read_text()[:400])
