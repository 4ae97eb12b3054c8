import json
import random

import pytest
from hypothesis import given, strategies as st

from conftest import ORACLE, FakeGateway, make_patient
from nephro.chartgen import ChartCache, build_series
from nephro.domain import observed_variables
from nephro.gateway import Gateway
from nephro.student import (
    DOC_INVALID, DOC_OK, DOC_STUB, PARSE_IMPUTED, PARSE_OK, PARSE_REPAIRED, CreativeItem, ExplanationDoc,
    MemoryEntry, SelectiveItem, Session, SessionTranscript, ShortTermMemory, StudentConfig, StudentFlags,
    build_predict_prompt, canonical_variable, match_interpretation, parse_explanation, run_patient_session,
    validate_explanation,
)
from nephro.teacher import TeacherConfig, run_teacher_stage

KT = StudentFlags(knowledge_transfer=True)
STM = StudentFlags(short_term_memory=True)
BOTH = StudentFlags(True, True)
CACHE = ChartCache()
OBSERVED = ["eGFR", "age", "sex", "diabetes", "hypertension", "creatinine", "BUN", "UACR"]

EXPLAIN = {
    "selective_items": [{"variable_name": "UACR", "observed_value_or_trend": "40 mg/g",
                         "contribution_direction": "lowers"}],
    "creative_items": [{"hypothesis_text": "possible NSAID use (not in record)", "flagged_unobserved": True}],
    "linkage": "albuminuria and a possible NSAID exposure explain the drop",
}


def fence(obj):
    return "```json\n" + json.dumps(obj) + "\n```"


def scripted(predictions):
    """Student replies: predictions[i] for the i-th predict call, EXPLAIN for explain calls."""
    state = {"n": 0}

    def respond(request, _):
        if request.template == "student_explain":
            return fence(EXPLAIN)
        value = predictions[min(state["n"], len(predictions) - 1)]
        state["n"] += 1
        return value if isinstance(value, str) else fence({"predicted_egfr": value, "reasoning": "trend"})
    return respond


@pytest.fixture
def teacher_map(patient12):
    return run_teacher_stage(build_series(patient12, 10), patient12, Gateway(), TeacherConfig(ORACLE))


def test_history_lengths_n10():
    p = make_patient("N10", [60 - i for i in range(10)])
    session = Session(p, {}, StudentConfig(ORACLE, STM), Gateway())
    assert session.history_lengths() == [7, 8, 9]
    t = session.run()
    assert [s.outcome.history_length for s in t.steps] == [7, 8, 9]
    assert [s.evaluated for s in t.steps] == [False, False, True]
    final_memory = t.steps[-1].memory_before
    assert len(final_memory) == 2 and all(e["ground_truth"] is not None for e in final_memory)
    assert [e["ground_truth"] for e in final_memory] == [p.observations[7].egfr, p.observations[8].egfr]


def test_too_short_patient():
    p = make_patient("S", [60, 59, 58, 57])
    with pytest.raises(Exception, match="cannot support"):
        Session(p, {}, StudentConfig(ORACLE), Gateway()).history_lengths()


def test_memory_containment():
    p = make_patient("M", [60, 58, 57, 55, 54, 53, 52.5])
    t = run_patient_session(p, {}, StudentConfig(ORACLE, STM), FakeGateway(scripted([47.2, 51.3, 50.0])))
    final = t.steps[-1].predict_prompt
    assert "47.20" in final and "51.30" in final
    assert "measured value was 54.00" in final and "measured value was 53.00" in final
    assert "52.50" not in final  # the evaluated target never leaks
    assert "NSAID" in final and "albuminuria and a possible" in final
    assert "47.20" in t.steps[1].predict_prompt and "measured value was 54.00" in t.steps[1].predict_prompt


def test_memory_flag_off():
    p = make_patient("M", [60, 58, 57, 55, 54, 53, 52.5])
    t = run_patient_session(p, {}, StudentConfig(ORACLE), FakeGateway(scripted([47.2, 51.3, 50.0])))
    for s in t.steps:
        assert "47.20" not in s.predict_prompt and "51.30" not in s.predict_prompt
        assert "Short-term memory" not in s.predict_prompt and "NSAID" not in s.predict_prompt


def test_memory_entry_example():
    mem = ShortTermMemory(2)
    import datetime as dt
    e = MemoryEntry(1, "p", 47.2, dt.date(2020, 5, 1), dt.date(2020, 4, 1))
    e.attach_ground_truth(45.0)
    with pytest.raises(ValueError):
        e.attach_ground_truth(44.0)
    mem.add(e)
    assert "47.20" in mem.prompt_block() and "45.00" in mem.prompt_block()
    with pytest.raises(ValueError):
        MemoryEntry(2, "p", 0.0, dt.date(2020, 5, 1), dt.date(2020, 4, 1))


def test_fifo_eviction():
    import datetime as dt
    mem = ShortTermMemory(2)
    entries = [MemoryEntry(i, "", 50.0, dt.date(2020, 1, i), dt.date(2019, 1, i)) for i in (1, 2, 3)]
    assert mem.add(entries[0]) is None and mem.add(entries[1]) is None
    assert mem.add(entries[2]) is entries[0]
    assert [e.step_index for e in mem.entries] == [2, 3]
    with pytest.raises(ValueError):
        mem.add(entries[1])


def test_three_warmups_evict_oldest():
    p = make_patient("W", [70 - i for i in range(9)])
    t = run_patient_session(p, {}, StudentConfig(ORACLE, STM, n_warmup=3), Gateway())
    assert [e["step_index"] for e in t.steps[-1].memory_before] == [2, 3]


def test_teacher_match_rule(patient12, teacher_map):
    assert match_interpretation(teacher_map, 8).chart_prefix_length == 8
    assert match_interpretation({5: teacher_map[5], 9: teacher_map[9]}, 8).chart_prefix_length == 5
    assert match_interpretation({9: teacher_map[9]}, 8) is None
    on = build_predict_prompt(patient12, 8, teacher_map[8], None, KT)
    off = build_predict_prompt(patient12, 8, teacher_map[8], None, StudentFlags())
    assert teacher_map[8].narrative in on.text and on.teacher_prefix == 8
    assert teacher_map[8].narrative not in off.text and "teacher" not in off.text.lower()


def _strip(prompt, section):
    return prompt.text.replace(prompt.sections[section], "", 1) if prompt.sections[section] else prompt.text


def test_ablation_isolation_single_prompt(patient12, teacher_map):
    mem = ShortTermMemory(2)
    import datetime as dt
    e = MemoryEntry(1, "", 60.0, dt.date(2020, 9, 1), dt.date(2020, 8, 1))
    e.attach_ground_truth(61.0)
    mem.add(e)
    prompts = {f: build_predict_prompt(patient12, 9, teacher_map[9], mem, f)
               for f in (StudentFlags(), KT, STM, BOTH)}
    for a, b, section in ((StudentFlags(), KT, "teacher_block"), (STM, BOTH, "teacher_block"),
                          (StudentFlags(), STM, "memory_block"), (KT, BOTH, "memory_block")):
        pa, pb = prompts[a], prompts[b]
        assert pa.text != pb.text
        changed = {k for k in pa.sections if pa.sections[k] != pb.sections[k]}
        assert changed == {section}
        assert _strip(pa, section) == _strip(pb, section)
        assert pa.image == pb.image


def test_ablation_isolation_sessions(patient12, teacher_map):
    runs = {f: run_patient_session(patient12, teacher_map, StudentConfig(ORACLE, f), Gateway())
            for f in (StudentFlags(), KT)}
    for s0, s1 in zip(runs[StudentFlags()].steps, runs[KT].steps):
        assert s0.outcome.predicted_egfr == s1.outcome.predicted_egfr
        block = s1.predict_prompt[s1.predict_prompt.index("\nChart interpretation"):]
        block = block[: block.index("\n\nTask:") + 1]
        assert s1.predict_prompt.replace(block, "", 1) == s0.predict_prompt


def test_oracle_exact_on_linear():
    slope = -2 / 31
    p = make_patient("L", [80 + slope * 31 * i for i in range(8)], gap=31)
    t = run_patient_session(p, {}, StudentConfig(ORACLE), Gateway())
    for s in t.steps:
        assert s.outcome.parse_status == PARSE_OK
        assert abs(s.outcome.predicted_egfr - s.ground_truth) < 1e-6


def test_repair_path():
    p = make_patient("R", [60, 58, 57, 55, 54, 53])
    gw = FakeGateway(scripted(["eGFR will be about 42", 42.0]))
    session = Session(p, {}, StudentConfig(ORACLE), gw)
    outcome, _ = session.predict_step(3)
    assert outcome.parse_status == PARSE_REPAIRED and outcome.predicted_egfr == 42.0
    assert outcome.backend_attempts == 2
    assert len(gw.requests[1].messages) == 4  # original, reply, repair request appended


def test_imputed_out_of_range():
    p = make_patient("I", [60, 58, 57, 55, 54, 53])
    gw = FakeGateway(scripted(['{"predicted_egfr": -5}']))
    session = Session(p, {}, StudentConfig(ORACLE), gw)
    outcome, _ = session.predict_step(4)
    assert outcome.parse_status == PARSE_IMPUTED
    assert outcome.predicted_egfr == 55.0
    assert "outside" in outcome.error and len(gw.requests) == 3  # R = 2 re-asks
    doc, text = session.explain_step(outcome)
    assert doc.status == DOC_STUB and text == ""


def test_transport_failure_imputes():
    from nephro.errors import TransportError
    p = make_patient("T", [60, 58, 57, 55, 54, 53])
    t = run_patient_session(p, {}, StudentConfig(ORACLE, STM), FakeGateway(lambda r, i: TransportError("down")))
    assert all(s.outcome.parse_status == PARSE_IMPUTED for s in t.steps)
    assert all(s.outcome.error.startswith("backend error") for s in t.steps)
    assert len(t.steps) == 3


def test_chaining_contains_prediction():
    p = make_patient("C", [60, 58, 57, 55, 54, 53])
    t = run_patient_session(p, {}, StudentConfig(ORACLE), FakeGateway(scripted([47.2, 51.3, 49.87])))
    for s, v in zip(t.steps, ("47.20", "51.30", "49.87")):
        assert v in s.explain_prompt
        assert s.explanation.status == DOC_OK


def test_explanation_validation_examples():
    ok = validate_explanation(parse_explanation(fence(EXPLAIN)), OBSERVED)
    assert ok.status == DOC_OK
    bad = dict(EXPLAIN, selective_items=[{"variable_name": "serum potassium", "observed_value_or_trend": "5.1",
                                          "contribution_direction": "lowers"}])
    flagged = validate_explanation(parse_explanation(fence(bad)), OBSERVED)
    assert flagged.status == DOC_INVALID and "serum potassium" in flagged.violations[0]
    no_labs = validate_explanation(parse_explanation(fence(EXPLAIN)), OBSERVED[:5])
    assert no_labs.status == DOC_INVALID
    leak = dict(EXPLAIN, creative_items=[{"hypothesis_text": "rising BUN from dehydration", "flagged_unobserved": True}])
    assert validate_explanation(parse_explanation(fence(leak)), OBSERVED).status == DOC_INVALID


def test_canonical_variable():
    assert canonical_variable("eGFR trend") == "eGFR"
    assert canonical_variable("Blood Urea Nitrogen (BUN)") == "BUN"
    assert canonical_variable("urine albumin-to-creatinine ratio") == "UACR"
    assert canonical_variable("serum potassium") is None
    assert canonical_variable(None) is None


def test_observed_variables_without_labs():
    p = make_patient("N", [60, 58, 57], labs=False)
    assert observed_variables(p.observations) == OBSERVED[:5]


JUNK = [
    "", "null", "[]", "{}", "```json\n{\n```", '{"selective_items": 5}', '{"selective_items": [1, 2]}',
    '{"creative_items": [{"hypothesis_text": {"a": 1}}]}', '{"selective_items": [], "creative_items": []}',
    '{"selective_items": [{"variable_name": null}]}', "\x00\x01", "{" * 300, '"just a string"',
]


def fuzz_reply(rng: random.Random) -> str:
    kind = rng.randrange(5)
    if kind == 0:
        return rng.choice(JUNK)
    if kind == 1:
        return "".join(chr(rng.randrange(1, 0x2FF)) for _ in range(rng.randrange(60)))
    if kind == 2:
        text = fence(EXPLAIN)
        cut = rng.randrange(len(text) - 5)  # always drops the closing brace
        return text[:cut]
    if kind == 3:
        obj = {"selective_items": [{"variable_name": rng.choice(["potassium", 7, None, "sodium"]),
                                    "observed_value_or_trend": rng.choice(["x", 3, None]),
                                    "contribution_direction": rng.choice(["up", "sideways", 0])}],
               "creative_items": [{"hypothesis_text": rng.choice(["", "creatinine spike", "NSAIDs"]),
                                   "flagged_unobserved": rng.choice([True, False, "yes"])}]}
        return json.dumps(obj)
    return rng.choice(["The value is 45.", "```json\n" + "[" * 50 + "\n```", "{'single': 'quotes'}"])


def test_fuzzed_explanations_never_crash():
    rng = random.Random(12345)
    p = make_patient("F", [60, 58, 57, 55, 54, 53])
    replies = [fuzz_reply(rng) for _ in range(500)]
    statuses = []
    for reply in replies:
        gw = FakeGateway(lambda r, i, reply=reply: reply if r.template == "student_explain"
                         else fence({"predicted_egfr": 50.0}))
        session = Session(p, {}, StudentConfig(ORACLE), gw, CACHE)
        outcome, _ = session.predict_step(4)
        doc, _ = session.explain_step(outcome)
        statuses.append(doc.status)
    assert len(statuses) == 500
    assert DOC_OK not in statuses  # every fuzzed reply is malformed or invalid


@given(st.text(max_size=200))
def test_parse_prediction_total(text):
    p = make_patient("H", [60, 58, 57, 55, 54, 53])
    session = Session(p, {}, StudentConfig(ORACLE), FakeGateway(lambda r, i: text), CACHE)
    outcome, _ = session.predict_step(4)
    assert 0 < outcome.predicted_egfr <= 250


def test_transcript_roundtrip(tmp_path, patient12, teacher_map):
    t = run_patient_session(patient12, teacher_map, StudentConfig(ORACLE, BOTH), Gateway())
    t.split = "train"
    t.save(tmp_path / "t.json")
    back = SessionTranscript.load(tmp_path / "t.json")
    assert back.to_dict() == t.to_dict()


def test_doc_dataclasses():
    doc = ExplanationDoc((SelectiveItem("eGFR", "down", "lowers"),), (CreativeItem("diet"),), "l")
    assert ExplanationDoc.from_dict(doc.to_dict()) == doc
    assert "diet" in doc.prompt_text()
