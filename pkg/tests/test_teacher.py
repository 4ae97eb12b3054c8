import json
import random

import pytest
from hypothesis import given, strategies as st

from conftest import ORACLE, FakeGateway, make_patient
from nephro.chartgen import ChartSeries, build_series
from nephro.datablock import format_block, patient_block, tabular_context
from nephro.domain import CkdStage, ckd_stage
from nephro.errors import TransportError
from nephro.gateway import Gateway
from nephro.teacher import (
    ZERO_SCORE, RubricScore, TeacherConfig, apply_stage_override, interpret_chart, load_teacher_map,
    parse_rubric, run_teacher_stage, save_teacher_map, score_interpretation, select_best, select_best_index,
)

GOOD = {
    "inflection_points": [{"date": "2020-03-01", "direction": "downturn"}],
    "recent_trend": "declining", "slope_estimate": -1.5,
    "short_term_change": {"direction": "down", "magnitude_band": "0-2"},
    "stage_classification": "G2", "narrative": "steady decline",
}


def fence(obj):
    return "```json\n" + json.dumps(obj) + "\n```"


def scores(totals_acc):
    out = []
    for total, acc in totals_acc:
        rest = total - acc
        out.append(RubricScore(acc, min(rest, 5), rest - min(rest, 5)))
    return out


def test_select_examples():
    # a total of 15 forces accuracy 5, so the tie-break case uses 14
    assert select_best_index(scores([(12, 4), (14, 5), (14, 4)])) == 1
    assert select_best_index(scores([(12, 4), (14, 4), (14, 5)])) == 2
    assert select_best_index(scores([(15, 5), (15, 5)])) == 0
    assert select_best_index(scores([(7, 2)])) == 0
    with pytest.raises(ValueError):
        select_best_index([])
    with pytest.raises(ValueError):
        select_best([])


def test_selection_optimal_random_vectors():
    rng = random.Random(0)
    for _ in range(1000):
        n = rng.randint(1, 6)
        s = [RubricScore(rng.randint(0, 5), rng.randint(0, 5), rng.randint(0, 5)) for _ in range(n)]
        best = select_best_index(s)
        assert all(s[best].total >= x.total for x in s)
        tied = [i for i, x in enumerate(s) if x.total == s[best].total]
        assert all(s[best].clinical_accuracy >= s[i].clinical_accuracy for i in tied)
        top = [i for i in tied if s[i].clinical_accuracy == s[best].clinical_accuracy]
        assert best == top[0]


def test_rubric_invariants():
    assert RubricScore(5, 5, 5).total == 15
    with pytest.raises(ValueError):
        RubricScore(6, 0, 0)
    with pytest.raises(ValueError):
        RubricScore(True, 0, 0)
    assert parse_rubric(fence({"clinical_accuracy": 4, "coherence": 3, "completeness": 2})).total == 9
    with pytest.raises(ValueError):
        parse_rubric(fence({"clinical_accuracy": 4.5, "coherence": 3, "completeness": 2}))


def chart_for(values, k=None):
    p = make_patient("T", values)
    series = build_series(p, 10)
    return p, series.charts[-1] if k is None else series.chart(k)


def test_stage_override_caps_accuracy():
    p, chart = chart_for([30, 28, 27, 25])
    gw = FakeGateway(lambda r, i: fence(GOOD) if r.template == "teacher_interpret" else
                     fence({"clinical_accuracy": 5, "coherence": 5, "completeness": 5}))
    cfg = TeacherConfig(ORACLE)
    block, tab = format_block(patient_block(p, 4)), tabular_context(p, 4)
    cands = interpret_chart(gw, chart, block, tab, cfg)
    assert cands.candidates[0].stage_classification is CkdStage.G2
    score = score_interpretation(gw, cands.candidates[0], chart, block, tab, cfg)
    assert score.clinical_accuracy == 1 and "override" in score.rationale
    consistent = cands.candidates[0]
    assert apply_stage_override(RubricScore(5, 5, 5), consistent, 75.0) == RubricScore(5, 5, 5)


@given(st.floats(1, 200), st.integers(0, 5), st.sampled_from(list(CkdStage)))
def test_override_property(last, acc, stage):
    from nephro.teacher import Interpretation
    interp = Interpretation(3, (), "stable", 0.0, ("flat", "0-2"), stage, "")
    out = apply_stage_override(RubricScore(acc, 3, 3), interp, last)
    if stage != ckd_stage(last):
        assert out.clinical_accuracy <= 1
    else:
        assert out.clinical_accuracy == acc


def test_evaluator_parse_failure_gives_zero():
    p, chart = chart_for([80, 78, 77])
    gw = FakeGateway(lambda r, i: "I think it is great")
    cands = interpret_chart(FakeGateway(lambda r, i: fence(GOOD)), chart, "", "", TeacherConfig(ORACLE))
    assert score_interpretation(gw, cands.candidates[0], chart, "", "", TeacherConfig(ORACLE)) == ZERO_SCORE


def test_one_malformed_of_three():
    p, chart = chart_for([80, 78, 77])
    replies = {0: fence(GOOD), 1: "garbage", 2: fence(GOOD)}
    gw = FakeGateway(lambda r, i: replies[r.sample_index] if len(r.messages) == 2 else "still garbage")
    cands = interpret_chart(gw, chart, "", "", TeacherConfig(ORACLE, fan_out=False))
    assert len(cands.candidates) == 2 and len(cands.failures) == 1
    assert not cands.degraded
    assert sorted(r.sample_index for r in gw.requests) == [0, 1, 1, 2]  # one repair re-ask


def test_repair_recovers_candidate():
    p, chart = chart_for([80, 78, 77])
    gw = FakeGateway(lambda r, i: fence(GOOD) if len(r.messages) > 2 else "oops")
    cands = interpret_chart(gw, chart, "", "", TeacherConfig(ORACLE, k=1))
    assert len(cands.candidates) == 1 and not cands.degraded


def test_all_malformed_degrades():
    p, chart = chart_for([40, 35, 25])
    cands = interpret_chart(FakeGateway(lambda r, i: "nope"), chart, "", "", TeacherConfig(ORACLE))
    assert cands.degraded and len(cands.failures) == 3
    d = cands.candidates[0]
    assert d.stage_classification == ckd_stage(25) and d.recent_trend == "declining"


def test_narrative_truncated():
    p, chart = chart_for([80, 78, 77])
    long = dict(GOOD, narrative=" ".join(["word"] * 500))
    cands = interpret_chart(FakeGateway(lambda r, i: fence(long)), chart, "", "", TeacherConfig(ORACLE, k=1))
    assert len(cands.candidates[0].narrative.split()) == 200


def test_oracle_stage_n12(patient12, tmp_path):
    series = build_series(patient12, 10)
    out = run_teacher_stage(series, patient12, Gateway(), TeacherConfig(ORACLE))
    assert list(out) == list(range(3, 13))
    for k, interp in out.items():
        assert interp.score.total == 15
        assert interp.stage_consistent(patient12.observations[k - 1].egfr)
    save_teacher_map(tmp_path, "P-12", out)
    assert (tmp_path / "P-12" / "prefix_3.json").is_file()
    assert load_teacher_map(tmp_path, "P-12") == out


def test_oracle_candidates_identical(patient12):
    chart = build_series(patient12, 10).charts[0]
    cands = interpret_chart(Gateway(), chart, format_block(patient_block(patient12, 3)), "", TeacherConfig(ORACLE))
    assert len(cands.candidates) == 3 and len(set(cands.candidates)) == 1


def test_stage_edges(patient12):
    assert run_teacher_stage(ChartSeries("P-12", 0, ()), patient12, Gateway(), TeacherConfig(ORACLE)) == {}
    one = build_series(patient12, 1)
    assert list(run_teacher_stage(one, patient12, Gateway(), TeacherConfig(ORACLE))) == [12]


def test_transport_failure_degrades_chart(patient12):
    series = build_series(patient12, 2)
    gw = FakeGateway(lambda r, i: TransportError("down"))
    out = run_teacher_stage(series, patient12, gw, TeacherConfig(ORACLE))
    assert all(i.degraded for i in out.values())


def test_evaluator_image_flag(patient12):
    chart = build_series(patient12, 1).charts[0]
    cand = interpret_chart(Gateway(), chart, format_block(patient_block(patient12, 12)), "", TeacherConfig(ORACLE, k=1))
    for flag, n in ((True, 1), (False, 0)):
        gw = FakeGateway(lambda r, i: fence({"clinical_accuracy": 3, "coherence": 3, "completeness": 3}))
        score_interpretation(gw, cand.candidates[0], chart, "", "", TeacherConfig(ORACLE, evaluator_sees_image=flag))
        assert len(gw.requests[0].images) == n
        assert gw.requests[0].temperature == 0.0
