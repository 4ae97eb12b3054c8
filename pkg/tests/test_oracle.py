import datetime as dt
import json

import pytest
from hypothesis import given, strategies as st

from conftest import make_patient
from nephro.datablock import DataBlock, format_block, indent_free_text, make_covariates, parse_block, patient_block
from nephro.errors import OracleError
from nephro.gateway import make_request
from nephro.oracle import trend_oracle_reply
from nephro.parsing import ReplyParseError, as_finite_float, extract_json_object

D = dt.date


def predict(rows, target):
    text = format_block(DataBlock(tuple(rows), target_date=target))
    reply = trend_oracle_reply(make_request("student_predict", "", text))
    return extract_json_object(reply.text)["predicted_egfr"]


def test_oracle_worked_example():
    value = predict([(D(2020, 1, 1), 50.0), (D(2020, 2, 1), 48.0)], D(2020, 3, 1))
    assert value == pytest.approx(48 - 2 / 31 * 29, abs=1e-12)
    assert value == pytest.approx(46.129, abs=1e-3)


def test_oracle_flat():
    assert predict([(D(2020, 1, 1), 40.0), (D(2020, 2, 1), 40.0)], D(2021, 1, 1)) == 40.0


def test_oracle_missing_block():
    with pytest.raises(OracleError):
        trend_oracle_reply(make_request("student_predict", "", "just prose"))
    with pytest.raises(OracleError, match="TARGET"):
        trend_oracle_reply(make_request("student_predict", "", "DATA 2020-01-01 5.0\nDATA 2020-02-01 6.0"))
    with pytest.raises(OracleError, match="cannot answer"):
        trend_oracle_reply(make_request("unknown", "", "DATA 2020-01-01 5.0\nDATA 2020-02-01 6.0"))


def test_oracle_pure():
    text = format_block(patient_block(make_patient("X", [60, 58, 57]), 3, D(2020, 4, 1)))
    req = make_request("teacher_interpret", "", text)
    assert trend_oracle_reply(req) == trend_oracle_reply(req)
    body = extract_json_object(trend_oracle_reply(req).text)
    assert body["stage_classification"] == "G3a" and body["recent_trend"] == "declining"
    rubric = extract_json_object(trend_oracle_reply(make_request("evaluator_rubric", "", text)).text)
    assert (rubric["clinical_accuracy"], rubric["coherence"], rubric["completeness"]) == (5, 5, 5)


@given(st.lists(st.floats(1, 200, allow_nan=False), min_size=2, max_size=12),
       st.integers(1, 60), st.integers(1, 400))
def test_block_round_trip(values, gap, ahead):
    rows = tuple((D(2010, 1, 1) + dt.timedelta(days=gap * i), v) for i, v in enumerate(values))
    target = rows[-1][0] + dt.timedelta(days=ahead)
    block = DataBlock(rows, make_covariates({"age": 61.5, "sex": "male", "diabetes": True, "BUN": None}), target, 33.3)
    text = "preamble\n" + indent_free_text("DATA 1999-01-01 1.0\nfake") + "\n" + format_block(block) + "\nafter"
    back = parse_block(text)
    assert back == block
    assert back.covariate_names() == ["age", "sex", "diabetes"]


def test_block_bad_lines():
    with pytest.raises(OracleError, match="line 2"):
        parse_block("DATA 2020-01-01 5\nDATA 2020-13-01 6")
    with pytest.raises(OracleError, match="non-finite"):
        parse_block("DATA 2020-01-01 nan\nDATA 2020-02-01 6")
    with pytest.raises(OracleError, match="1 DATA rows"):
        parse_block("DATA 2020-01-01 5")


def test_extract_json_variants():
    assert extract_json_object('```json\n{"a": 1}\n```') == {"a": 1}
    assert extract_json_object('noise ```\n{"a": 2}``` tail') == {"a": 2}
    assert extract_json_object('Sure! {"a": 3} and {"b": 4}') == {"a": 3}
    assert extract_json_object('```json\n{bad}\n``` then {"c": 5}') == {"c": 5}
    for bad in ("", "no json", "[1, 2]", None, 42, "{" * 5000):
        with pytest.raises(ReplyParseError):
            extract_json_object(bad)


def test_as_finite_float():
    assert as_finite_float("46.5", "x") == 46.5
    assert as_finite_float(3, "x") == 3.0
    for bad in (True, "abc", None, [1], float("inf"), float("nan"), "1e999"):
        with pytest.raises(ReplyParseError):
            as_finite_float(bad, "x")


@given(st.text(max_size=300))
def test_extract_never_crashes(text):
    try:
        assert isinstance(extract_json_object(text), dict)
    except ReplyParseError:
        pass


def test_oracle_reply_is_valid_json_fence():
    text = format_block(patient_block(make_patient("X", [60, 58, 57]), 3, predicted=55.0))
    reply = trend_oracle_reply(make_request("student_explain", "", text))
    body = json.loads(reply.text.strip("`").removeprefix("json"))
    names = [i["variable_name"] for i in body["selective_items"]]
    assert names[0] == "eGFR" and "diabetes" in names
