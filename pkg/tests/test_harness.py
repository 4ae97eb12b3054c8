import dataclasses
import time

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import ORACLE, linear_config
from nephro.cohort import synth_cohort
from nephro.datablock import parse_block
from nephro.errors import ValidationError
from nephro.gateway import BackendConfig
from nephro.harness import (
    CAVEAT, DEFAULT_CELLS, MD_HEADER, BaselineSettings, EvalRow, RunConfig, execute, mae, mape, mse, render_report,
    render_table_csv, render_table_md, transport_failures,
)
from nephro.baselines import ForestConfig
from nephro.teacher import TeacherConfig

FAST_RF = BaselineSettings(forest=ForestConfig(n_trees=20, seed=0))
DEAD = BackendConfig("dead", "remote_http", model_name="dead-model", endpoint_url="http://127.0.0.1:1/v1",
                     max_retries=0, timeout=2.0)


def test_metric_examples():
    assert mae([50, 60], [48, 64]) == 3.0
    assert mae([10], [13]) == 3.0
    assert mae([1, 2], [1, 2]) == 0.0
    assert mape([45], [50]) == pytest.approx(10.0, abs=1e-12)
    assert mape([0.1], [0.1]) == 0.0
    assert mse([50, 60], [48, 64]) == 10.0
    for bad in (([], []), ([1], [1, 2])):
        with pytest.raises(ValidationError):
            mae(*bad)
    with pytest.raises(ValidationError):
        mape([1], [0])


def test_metric_oracles_1000_vectors():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    for _ in range(1000):
        n = int(rng.integers(1, 50))
        p = rng.uniform(0.1, 150, n).tolist()
        t = rng.uniform(0.1, 150, n).tolist()
        assert abs(mae(p, t) - sum(abs(a - b) for a, b in zip(p, t)) / n) < 1e-12
        assert abs(mape(p, t) - sum(abs(a - b) / b for a, b in zip(p, t)) / n * 100) < 1e-12 * 100
    assert time.perf_counter() - start < 1.0


@given(st.lists(st.floats(0, 200), min_size=1, max_size=30))
def test_mape_equals_mae_at_100(preds):
    truths = [100.0] * len(preds)
    assert mape(preds, truths) == pytest.approx(mae(preds, truths), rel=1e-12, abs=1e-12)


def test_eval_row_invariants():
    with pytest.raises(ValidationError):
        EvalRow("m", "zero-shot", "test", 1.0, 1.0, 1.0, 1, 0)
    with pytest.raises(ValidationError):
        EvalRow("m", "zero-shot", "train", 1.0, 1.0, 1.0, 1, 2)
    with pytest.raises(ValidationError):
        EvalRow("m", "zero-shot", "train", -1.0, 1.0, 1.0, 1, 0)


def test_run_config_needs_teacher():
    cohort = synth_cohort(linear_config(n_patients=5))
    with pytest.raises(ValidationError, match="teacher"):
        RunConfig(cohort, (ORACLE,))
    RunConfig(cohort, (ORACLE,), cells=(DEFAULT_CELLS[0],))


@pytest.fixture(scope="module")
def linear_run():
    cohort = synth_cohort(linear_config())
    config = RunConfig(cohort, (ORACLE,), TeacherConfig(ORACLE), baselines=FAST_RF)
    return config, execute(config)


def test_oracle_exact_every_cell(linear_run):
    _, result = linear_run
    oracle_rows = [r for r in result.rows if r.model_label == "trend-oracle"]
    assert len(oracle_rows) == 8
    for r in oracle_rows:
        assert r.status == "ok" and r.mae < 1e-6 and r.n_imputed == 0


def test_last_value_matches_independent_average(linear_run):
    config, result = linear_run
    expected = {"train": [], "validation": []}
    for p in config.cohort:
        a, b = p.observations[-2], p.observations[-1]
        slope_per_day = (b.egfr - a.egfr) / (b.date - a.date).days
        expected[result.splits[p.id]].append(abs(slope_per_day * (b.date - a.date).days))
    rows = {r.split: r for r in result.rows if r.model_label == "last value"}
    for split, errors in expected.items():
        assert abs(rows[split].mae - sum(errors) / len(errors)) < 1e-9


def test_grid_completeness(linear_run):
    config, result = linear_run
    n_base = len(config.baselines.models) * 2
    assert len(result.rows) == len(config.students) * len(config.cells) * 2 + n_base
    keys = {(r.model_label, r.method_label, r.split) for r in result.rows}
    assert len(keys) == len(result.rows)


def test_determinism(linear_run):
    config, result = linear_run
    assert execute(config).rows == result.rows


def test_train_validation_separation(linear_run):
    config, result = linear_run
    by_id = {p.id: p for p in config.cohort}
    train_ids = {pid for pid, s in result.splits.items() if s == "train"}
    assert set(result.baselines.train_patient_ids) == train_ids
    for t in result.transcripts:
        assert t.split == result.splits[t.patient_id]
        own = {(o.date, float(o.egfr)) for o in by_id[t.patient_id].observations}
        for s in t.steps:
            rows = parse_block(s.predict_prompt).rows
            assert set(rows) <= own
            assert len(rows) == s.outcome.history_length
            if s.teacher_prefix is not None:
                assert s.teacher_prefix <= s.outcome.history_length
    for pid, tmap in result.teacher.items():
        assert all(k <= by_id[pid].n_obs for k in tmap)


def test_failed_cell_isolated():
    cohort = synth_cohort(linear_config(n_patients=6))
    config = RunConfig(cohort, (ORACLE, DEAD), cells=DEFAULT_CELLS[:1], baselines=FAST_RF)
    result = execute(config)
    dead = [r for r in result.rows if r.model_label == "dead-model"]
    assert len(dead) == 2 and all(r.status == "failed" for r in dead)
    assert all(r.error.startswith("backend error") for r in dead)
    assert transport_failures(result.rows) == dead
    ok = [r for r in result.rows if r.model_label != "dead-model"]
    assert len(ok) == 2 + 6 and all(r.status == "ok" for r in ok)


RF_ROWS = [
    EvalRow("RF", "baseline", "train", 1.02, 4.35, 1.5, 10, 0),
    EvalRow("RF", "baseline", "validation", 2.64, 11.06, 9.0, 5, 0),
]


def test_table_fixture_row():
    md = render_table_md(RF_ROWS)
    lines = md.splitlines()
    assert lines[0] == MD_HEADER == "| Model | Method | Train MAE | MAPE(%) | Val MAE | MAPE(%) |"
    assert lines[2] == "| RF | - | 1.02 | 4.35 | 2.64 | 11.06 |"
    csv = render_table_csv(RF_ROWS).splitlines()
    assert csv[0] == f"# {CAVEAT}"
    assert csv[1].startswith("model,method,train_mae,train_mape_pct,val_mae,val_mape_pct")
    assert csv[2].startswith("RF,-,1.0200,4.3500,2.6400,11.0600")


def test_failed_and_empty_cells_render():
    rows = [
        EvalRow("m", "zero-shot", "train", None, None, None, 0, 0, "failed", "backend error: x"),
        EvalRow("m", "zero-shot", "validation", None, None, None, 0, 0, "empty"),
    ]
    assert "| m | zero-shot | failed | failed | n/a | n/a |" in render_table_md(rows)


def test_report_without_transcripts(tmp_path):
    written = render_report(RF_ROWS, [], tmp_path)
    assert set(written) == {"report.csv", "report.md"}
    md = (tmp_path / "report.md").read_text()
    assert CAVEAT in md and "1.02" in md and "11.06" in md
    assert not (tmp_path / "cards").exists()
    with pytest.raises(ValueError):
        render_report([], [], tmp_path)


def test_report_full_and_byte_identical(tmp_path, linear_run):
    config, result = linear_run
    a, b = tmp_path / "a", tmp_path / "b"
    wa = render_report(result.rows, result.transcripts, a, config.cohort, result.baselines.predictions)
    wb = render_report(result.rows, result.transcripts, b, config.cohort, result.baselines.predictions)
    assert sorted(wa) == sorted(wb)
    for name in wa:
        assert wa[name].read_bytes() == wb[name].read_bytes(), name
    assert list((a / "cards").iterdir()) == [a / "cards" / "trend_oracle.md"]
    card = (a / "cards" / "trend_oracle.md").read_text()
    assert "Selective abduction" in card and "Creative abduction" in card and "NSAID" in card
    assert len(list((a / "plots").glob("*.png"))) == len(config.cohort)
    md = (a / "report.md").read_text()
    assert md.count("](plots/") == len(config.cohort) + 1  # plot list plus the card image


@pytest.mark.filterwarnings("ignore:stratum")
def test_card_per_student_backend(tmp_path):
    cohort = synth_cohort(linear_config(n_patients=4))
    other = dataclasses.replace(ORACLE, name="oracle2", model_name="second-oracle")
    config = RunConfig(cohort, (ORACLE, other), cells=DEFAULT_CELLS[:1], baselines=FAST_RF)
    result = execute(config)
    render_report(result.rows, result.transcripts, tmp_path, cohort, result.baselines.predictions)
    assert sorted(p.name for p in (tmp_path / "cards").iterdir()) == ["second_oracle.md", "trend_oracle.md"]
