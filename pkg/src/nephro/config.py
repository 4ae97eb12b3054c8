"""Run configuration: one JSON document plus dotted-key overrides.

Every key must already exist in ``DEFAULT_CONFIG``; the only open mapping
is ``backends``, whose entries are checked against BackendConfig fields.
"""

from __future__ import annotations

import copy
import dataclasses
import datetime as dt
import json
from pathlib import Path
from typing import Any, Optional, Sequence

from nephro.baselines import ForestConfig
from nephro.cohort import SynthConfig
from nephro.errors import ValidationError
from nephro.gateway import BackendConfig
from nephro.harness.ablation import CELLS_BY_SLUG, AblationCell, BaselineSettings, StudentSettings
from nephro.teacher import TeacherConfig

DEFAULT_CONFIG: dict[str, Any] = {
    "cohort": {
        "source": "synthetic",  # synthetic | csv
        "csv_path": None,
        "synth": {
            "n_patients": 50,
            "obs_per_patient": [8, 14],
            "baseline_egfr": [[60.0, 89.0], [45.0, 59.0], [30.0, 44.0], [16.0, 29.0]],
            "baseline_weights": [0.3, 0.3, 0.25, 0.15],
            "monthly_slope": [-0.5, 0.4],
            "noise_sigma": 1.5,
            "inflection_probability": 0.3,
            "inflection_slope_change": 1.0,
            "trend_floor": 8.0,
            "visit_interval_days": [60, 120],
            "start_date": "2004-01-01",
            "start_spread_days": 3650,
            "lab_probability": 0.85,
            "seed": 42,
            "id_prefix": "SYN",
        },
    },
    "split": {"train_fraction": 0.7, "seed": 0},
    "chartgen": {"width_px": 800, "height_px": 600},
    "backends": {
        "oracle": {"kind": "trend_oracle", "model_name": "trend-oracle"},
    },
    "teacher": {
        "backend": "oracle",
        "evaluator": None,
        "k": 3,
        "temperature": 0.7,
        "evaluator_temperature": 0.0,
        "evaluator_sees_image": True,
        "parse_retries": 1,
    },
    "student": {
        "backends": ["oracle"],
        "memory_capacity": 2,
        "n_warmup": 2,
        "eval_steps": 1,
        "parse_retries": 2,
        "temperature": 0.2,
        "explain_temperature": 0.2,
    },
    "baselines": {
        "models": ["RF", "last value", "linear trend"],
        "linear_window": 4,
        "rf": {"n_trees": 200, "max_depth": 12, "min_leaf": 2, "features_per_split": None,
               "bootstrap": True, "seed": 0},
    },
    "ablation": {"cells": ["zero_shot", "kt", "kt_stm", "zs_stm"]},
    "output": {"root": "runs", "run_id": "default"},
}

_OPEN_MAPPINGS = ("backends",)


def _merge(base: dict, update: dict, path: str, problems: list[str]) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        dotted = f"{path}.{key}" if path else key
        if key not in base:
            problems.append(f"unknown config key '{dotted}'")
        elif isinstance(base[key], dict) and not isinstance(value, dict):
            problems.append(f"config key '{dotted}' must be an object")
        elif dotted in _OPEN_MAPPINGS:
            out[key].update(copy.deepcopy(value))
        elif isinstance(base[key], dict):
            out[key] = _merge(base[key], value, dotted, problems)
        else:
            out[key] = value
    return out


def merge_config(update: dict, base: Optional[dict] = None) -> dict:
    problems: list[str] = []
    merged = _merge(DEFAULT_CONFIG if base is None else base, update, "", problems)
    if problems:
        raise ValidationError(problems)
    return merged


def parse_override(text: str) -> tuple[list[str], Any]:
    key, eq, raw = text.partition("=")
    if not eq or not key.strip():
        raise ValidationError(f"override {text!r} is not of the form key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(config: dict, overrides: Sequence[str]) -> dict:
    """Set dotted keys; every path must already exist in ``config``."""
    out = copy.deepcopy(config)
    problems = []
    for text in overrides:
        parts, value = parse_override(text)
        node = out
        for i, part in enumerate(parts):
            # keys inside open mappings are checked later by the typed views
            is_open = any(".".join(parts[:j]) in _OPEN_MAPPINGS for j in range(1, i + 1))
            if is_open and isinstance(node, dict) and part not in node and i < len(parts) - 1:
                node[part] = {}
            if not isinstance(node, dict) or (part not in node and not is_open):
                problems.append(f"unknown config key '{'.'.join(parts[: i + 1])}'")
                break
            if i == len(parts) - 1:
                node[part] = value
            else:
                node = node[part]
    if problems:
        raise ValidationError(problems)
    return out


def load_config(path: Optional[Path] = None, overrides: Sequence[str] = ()) -> dict:
    update = {}
    if path is not None:
        try:
            update = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from None
        if not isinstance(update, dict):
            raise ValidationError(f"config {path} must be a JSON object")
    config = apply_overrides(merge_config(update), overrides)
    check_config(config)
    return config


# -- typed views ------------------------------------------------------------


def synth_config(config: dict) -> SynthConfig:
    s = dict(config["cohort"]["synth"])
    try:
        s["obs_per_patient"] = tuple(s["obs_per_patient"])
        s["baseline_egfr"] = tuple(tuple(r) for r in s["baseline_egfr"])
        s["baseline_weights"] = tuple(s["baseline_weights"])
        s["monthly_slope"] = tuple(s["monthly_slope"])
        s["visit_interval_days"] = tuple(s["visit_interval_days"])
        s["start_date"] = dt.date.fromisoformat(s["start_date"])
        return SynthConfig(**s)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"cohort.synth: {exc}") from None


def backends(config: dict) -> dict[str, BackendConfig]:
    out = {}
    problems = []
    for name, data in sorted(config["backends"].items()):
        if not isinstance(data, dict):
            problems.append(f"backends.{name} must be an object")
            continue
        try:
            out[name] = BackendConfig.from_dict(name, data)
        except ValidationError as exc:
            problems.extend(exc.problems)
        except TypeError as exc:
            problems.append(f"backends.{name}: {exc}")
    if problems:
        raise ValidationError(problems)
    return out


def _backend(roster: dict[str, BackendConfig], name: Optional[str], where: str) -> BackendConfig:
    if name not in roster:
        raise ValidationError(f"{where} names unknown backend {name!r}")
    return roster[name]


def teacher_config(config: dict) -> TeacherConfig:
    t = config["teacher"]
    roster = backends(config)
    evaluator = _backend(roster, t["evaluator"], "teacher.evaluator") if t["evaluator"] else None
    return TeacherConfig(
        backend=_backend(roster, t["backend"], "teacher.backend"),
        evaluator=evaluator,
        k=int(t["k"]),
        temperature=float(t["temperature"]),
        evaluator_temperature=float(t["evaluator_temperature"]),
        evaluator_sees_image=bool(t["evaluator_sees_image"]),
        parse_retries=int(t["parse_retries"]),
    )


def student_backends(config: dict) -> tuple[BackendConfig, ...]:
    roster = backends(config)
    names = config["student"]["backends"]
    if not isinstance(names, list) or not names:
        raise ValidationError("student.backends must be a non-empty list")
    return tuple(_backend(roster, n, "student.backends") for n in names)


def student_settings(config: dict) -> StudentSettings:
    s = config["student"]
    return StudentSettings(**{f.name: s[f.name] for f in dataclasses.fields(StudentSettings)})


def cells(config: dict) -> tuple[AblationCell, ...]:
    names = config["ablation"]["cells"]
    unknown = [n for n in names if n not in CELLS_BY_SLUG]
    if unknown or not names:
        raise ValidationError(f"ablation.cells must be a non-empty subset of {sorted(CELLS_BY_SLUG)}, got {names}")
    return tuple(CELLS_BY_SLUG[n] for n in names)


def baseline_settings(config: dict) -> BaselineSettings:
    b = config["baselines"]
    rf = b["rf"]
    forest = ForestConfig(**rf)
    if forest.problems():
        raise ValidationError([f"baselines.rf: {p}" for p in forest.problems()])
    models = tuple(b["models"])
    known = BaselineSettings().models
    if any(m not in known for m in models):
        raise ValidationError(f"baselines.models must be a subset of {list(known)}, got {list(models)}")
    return BaselineSettings(forest=forest, linear_window=int(b["linear_window"]), models=models)


def check_config(config: dict) -> None:
    """Build every typed view once so errors surface before any stage runs."""
    problems = []
    if config["cohort"]["source"] not in ("synthetic", "csv"):
        problems.append("cohort.source must be 'synthetic' or 'csv'")
    elif config["cohort"]["source"] == "csv" and not config["cohort"]["csv_path"]:
        problems.append("cohort.csv_path is required when cohort.source is 'csv'")
    frac = config["split"]["train_fraction"]
    if not isinstance(frac, (int, float)) or not 0 < frac < 1:
        problems.append("split.train_fraction must lie in (0, 1)")
    for view in (synth_config, teacher_config, student_backends, student_settings, cells, baseline_settings):
        try:
            view(config)
        except ValidationError as exc:
            problems.extend(exc.problems)
        except (TypeError, KeyError) as exc:
            problems.append(f"{view.__name__}: {exc}")
    if not problems and config["cohort"]["source"] == "synthetic":
        problems.extend(f"cohort.synth: {p}" for p in synth_config(config).problems())
    run_id = str(config["output"]["run_id"])
    if not run_id or "/" in run_id or run_id in (".", ".."):
        problems.append(f"output.run_id {run_id!r} is not a plain directory name")
    if problems:
        raise ValidationError(problems)
