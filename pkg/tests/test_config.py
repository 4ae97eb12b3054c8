import json

import pytest

from nephro.config import (
    DEFAULT_CONFIG, apply_overrides, backends, baseline_settings, cells, check_config, load_config, merge_config,
    parse_override, student_settings, synth_config, teacher_config,
)
from nephro.errors import ValidationError


def test_defaults_valid():
    check_config(DEFAULT_CONFIG)
    assert synth_config(DEFAULT_CONFIG).seed == 42
    assert teacher_config(DEFAULT_CONFIG).k == 3
    assert student_settings(DEFAULT_CONFIG).temperature == 0.2
    assert [c.slug for c in cells(DEFAULT_CONFIG)] == ["zero_shot", "kt", "kt_stm", "zs_stm"]
    assert baseline_settings(DEFAULT_CONFIG).forest.n_trees == 200


def test_parse_override():
    assert parse_override("a.b=3") == (["a", "b"], 3)
    assert parse_override('a=["x"]') == (["a"], ["x"])
    assert parse_override("a=plain text") == (["a"], "plain text")
    with pytest.raises(ValidationError):
        parse_override("novalue")


def test_unknown_keys_all_reported():
    with pytest.raises(ValidationError) as err:
        merge_config({"cohort": {"nope": 1}, "extra": {}})
    assert len(err.value.problems) == 2
    with pytest.raises(ValidationError, match="split.seed.x"):
        apply_overrides(DEFAULT_CONFIG, ["split.seed.x=1"])


def test_backends_open_mapping(tmp_path):
    cfg = merge_config({"backends": {"local": {"kind": "remote_http", "endpoint_url": "http://h/v1",
                                                "model_name": "qwen"}}})
    assert set(backends(cfg)) == {"oracle", "local"}
    cfg = apply_overrides(cfg, ["backends.local.temperature=0.5", 'backends.fx={"kind": "trend_oracle"}'])
    assert backends(cfg)["local"].temperature == 0.5 and "fx" in backends(cfg)
    with pytest.raises(ValidationError, match="unknown keys"):
        check_config(apply_overrides(cfg, ["backends.local.colour=1"]))


def test_role_checks():
    with pytest.raises(ValidationError, match="student.backends"):
        check_config(apply_overrides(DEFAULT_CONFIG, ['student.backends=["ghost"]']))
    with pytest.raises(ValidationError, match="ablation.cells"):
        check_config(apply_overrides(DEFAULT_CONFIG, ['ablation.cells=["everything"]']))
    with pytest.raises(ValidationError, match="run_id"):
        check_config(apply_overrides(DEFAULT_CONFIG, ["output.run_id=../x"]))
    with pytest.raises(ValidationError, match="csv_path"):
        check_config(apply_overrides(DEFAULT_CONFIG, ["cohort.source=csv"]))


def test_load_config_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"split": {"seed": 3}}))
    cfg = load_config(path, ["split.train_fraction=0.6"])
    assert cfg["split"] == {"train_fraction": 0.6, "seed": 3}
    assert DEFAULT_CONFIG["split"]["seed"] == 0  # defaults untouched
    path.write_text("[1]")
    with pytest.raises(ValidationError):
        load_config(path)
    with pytest.raises(ValidationError):
        load_config(tmp_path / "missing.json")
