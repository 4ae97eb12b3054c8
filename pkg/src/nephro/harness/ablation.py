"""Ablation grid: every student backend under every flag cell, plus baselines.

The helpers here double as the CLI stages, so a one-shot ``execute`` and a
stage-by-stage run over files produce the same rows.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import logging
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from nephro.baselines import ForestConfig, feature_vector, last_value_predict, linear_trend_predict, rf_fit, training_rows
from nephro.baselines.forest import ForestModel
from nephro.chartgen import ChartCache, build_series
from nephro.cohort import Cohort, median_obs_count, stratified_split
from nephro.errors import NephroError, ValidationError
from nephro.gateway import BackendConfig, Gateway
from nephro.harness.metrics import mae, mape, mse
from nephro.student import PARSE_IMPUTED, SessionTranscript, StudentConfig, StudentFlags, run_patient_session
from nephro.teacher import Interpretation, TeacherConfig, run_teacher_stage

logger = logging.getLogger(__name__)

SPLITS = ("train", "validation")
BASELINE_METHOD = "baseline"
BACKEND_ERROR_PREFIX = "backend error"


@dataclasses.dataclass(frozen=True)
class AblationCell:
    slug: str
    flags: StudentFlags

    @property
    def label(self) -> str:
        return self.flags.label


DEFAULT_CELLS = (
    AblationCell("zero_shot", StudentFlags(False, False)),
    AblationCell("kt", StudentFlags(True, False)),
    AblationCell("kt_stm", StudentFlags(True, True)),
    AblationCell("zs_stm", StudentFlags(False, True)),
)
CELLS_BY_SLUG = {c.slug: c for c in DEFAULT_CELLS}


@dataclasses.dataclass(frozen=True)
class StudentSettings:
    memory_capacity: int = 2
    n_warmup: int = 2
    eval_steps: int = 1
    parse_retries: int = 2
    temperature: float = 0.2
    explain_temperature: float = 0.2

    def config_for(self, backend: BackendConfig, flags: StudentFlags) -> StudentConfig:
        return StudentConfig(
            backend=backend,
            flags=flags,
            memory_capacity=self.memory_capacity,
            n_warmup=self.n_warmup,
            eval_steps=self.eval_steps,
            parse_retries=self.parse_retries,
            temperature=self.temperature,
            explain_temperature=self.explain_temperature,
        )


@dataclasses.dataclass(frozen=True)
class BaselineSettings:
    forest: ForestConfig = ForestConfig()
    linear_window: int = 4
    models: tuple[str, ...] = ("RF", "last value", "linear trend")


@dataclasses.dataclass(frozen=True)
class RunConfig:
    cohort: Cohort
    students: tuple[BackendConfig, ...]
    teacher: Optional[TeacherConfig] = None
    cells: tuple[AblationCell, ...] = DEFAULT_CELLS
    train_fraction: float = 0.7
    split_seed: int = 0
    student: StudentSettings = StudentSettings()
    baselines: BaselineSettings = BaselineSettings()
    run_id: str = "default"

    def __post_init__(self) -> None:
        problems = []
        if not self.students:
            problems.append("at least one student backend is required")
        names = [b.name for b in self.students]
        if len(set(names)) != len(names):
            problems.append(f"student backend names must be unique, got {names}")
        slugs = [c.slug for c in self.cells]
        if len(set(slugs)) != len(slugs):
            problems.append(f"ablation cell names must be unique, got {slugs}")
        if needs_teacher(self.cells) and self.teacher is None:
            problems.append("a knowledge-transfer cell needs a teacher backend")
        if problems:
            raise ValidationError(problems)


@dataclasses.dataclass(frozen=True)
class EvalRow:
    model_label: str
    method_label: str
    split: str
    mae: Optional[float]
    mape_pct: Optional[float]
    mse: Optional[float]
    n_predictions: int
    n_imputed: int
    status: str = "ok"  # ok | failed | empty
    error: str = ""

    def __post_init__(self) -> None:
        if self.split not in SPLITS:
            raise ValidationError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.n_imputed > self.n_predictions:
            raise ValidationError("n_imputed cannot exceed n_predictions")
        for v in (self.mae, self.mape_pct, self.mse):
            if v is not None and not v >= 0:
                raise ValidationError("metrics must be non-negative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalRow":
        return cls(**d)


def scored_row(model: str, method: str, split: str, preds: Sequence[float], truths: Sequence[float],
               n_imputed: int = 0) -> EvalRow:
    if not preds:
        return EvalRow(model, method, split, None, None, None, 0, 0, status="empty")
    return EvalRow(model, method, split, mae(preds, truths), mape(preds, truths), mse(preds, truths),
                   len(preds), n_imputed)


def failed_row(model: str, method: str, split: str, error: str, n_predictions: int = 0, n_imputed: int = 0) -> EvalRow:
    return EvalRow(model, method, split, None, None, None, n_predictions, n_imputed, status="failed", error=error)


def needs_teacher(cells: Iterable[AblationCell]) -> bool:
    return any(c.flags.knowledge_transfer for c in cells)


def assign_splits(cohort: Cohort, train_fraction: float, seed: int) -> dict[str, str]:
    train, val = stratified_split(cohort, train_fraction, seed)
    out = {pid: "train" for pid in train.ids}
    out.update({pid: "validation" for pid in val.ids})
    return dict(sorted(out.items()))


def _workers(backend: BackendConfig, n_items: int) -> int:
    # scripted backends are CPU-bound; threads only help when waiting on a network
    if backend.kind != "remote_http":
        return 1
    return max(1, min(backend.max_in_flight, n_items))


def _ordered_map(fn, items: Sequence, workers: int) -> list:
    if workers <= 1:
        return [fn(x) for x in items]
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def teacher_maps(cohort: Cohort, config: TeacherConfig, gateway: Gateway,
                 cache: Optional[ChartCache] = None) -> dict[str, dict[int, Interpretation]]:
    m = median_obs_count(cohort)

    def one(patient):
        series = build_series(patient, m, cache)
        return run_teacher_stage(series, patient, gateway, config)

    maps = _ordered_map(one, list(cohort), _workers(config.backend, len(cohort)))
    return {p.id: mp for p, mp in zip(cohort, maps)}


def run_cell(cohort: Cohort, splits: Mapping[str, str], teacher: Mapping[str, Mapping[int, Interpretation]],
             backend: BackendConfig, cell: AblationCell, settings: StudentSettings, gateway: Gateway,
             cache: Optional[ChartCache] = None) -> list[SessionTranscript]:
    """Sessions for every patient of one (student, cell) pair."""
    config = settings.config_for(backend, cell.flags)

    def one(patient):
        tmap = teacher.get(patient.id, {}) if cell.flags.knowledge_transfer else {}
        transcript = run_patient_session(patient, tmap, config, gateway, cache)
        transcript.split = splits[patient.id]
        return transcript

    return _ordered_map(one, list(cohort), _workers(backend, len(cohort)))


def is_backend_failure(transcripts: Sequence[SessionTranscript]) -> bool:
    outcomes = [s.outcome for t in transcripts for s in t.evaluated_steps]
    return bool(outcomes) and all(o.error.startswith(BACKEND_ERROR_PREFIX) for o in outcomes)


def cell_rows(model: str, method: str, transcripts: Sequence[SessionTranscript]) -> list[EvalRow]:
    rows = []
    for split in SPLITS:
        part = [t for t in transcripts if t.split == split]
        steps = [s for t in part for s in t.evaluated_steps]
        n_imputed = sum(s.outcome.parse_status == PARSE_IMPUTED for s in steps)
        if is_backend_failure(part):
            rows.append(failed_row(model, method, split, steps[0].outcome.error, len(steps), n_imputed))
            continue
        preds = [s.outcome.predicted_egfr for s in steps]
        truths = [s.ground_truth for s in steps]
        rows.append(scored_row(model, method, split, preds, truths, n_imputed))
    return rows


def evaluated_history_lengths(n_obs: int, eval_steps: int) -> list[int]:
    """History lengths of the scored steps, matching the student protocol."""
    return list(range(n_obs - eval_steps, n_obs))


@dataclasses.dataclass(frozen=True)
class BaselinePrediction:
    model: str
    patient_id: str
    split: str
    history_length: int
    predicted: float
    truth: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclasses.dataclass
class BaselineResult:
    predictions: list[BaselinePrediction]
    forest: Optional[ForestModel]
    train_patient_ids: tuple[str, ...]


def run_baselines(cohort: Cohort, splits: Mapping[str, str], settings: BaselineSettings, eval_steps: int) -> BaselineResult:
    train_patients = [p for p in cohort if splits[p.id] == "train"]
    forest = None
    if "RF" in settings.models:
        rows = training_rows(train_patients)
        X = np.array([fv.values for fv, _ in rows], dtype=float)
        y = np.array([t for _, t in rows], dtype=float)
        forest = rf_fit(X, y, settings.forest)
    preds = []
    for p in cohort:
        for h in evaluated_history_lengths(p.n_obs, eval_steps):
            history = p.observations[:h]
            target = p.observations[h]
            for model in settings.models:
                if model == "RF":
                    value = float(forest.predict([feature_vector(p, h, target.date).values])[0])
                elif model == "last value":
                    value = last_value_predict(history)
                elif model == "linear trend":
                    value = linear_trend_predict(history, settings.linear_window, target.date)
                else:
                    raise ValidationError(f"unknown baseline model {model!r}")
                preds.append(BaselinePrediction(model, p.id, splits[p.id], h, value, float(target.egfr)))
    return BaselineResult(preds, forest, tuple(p.id for p in train_patients))


def baseline_rows(predictions: Sequence[BaselinePrediction], models: Sequence[str]) -> list[EvalRow]:
    rows = []
    for model in models:
        for split in SPLITS:
            part = [x for x in predictions if x.model == model and x.split == split]
            rows.append(scored_row(model, BASELINE_METHOD, split, [x.predicted for x in part], [x.truth for x in part]))
    return rows


@dataclasses.dataclass
class CellRun:
    student: str
    cell: AblationCell
    transcripts: list[SessionTranscript]
    error: str = ""


@dataclasses.dataclass
class AblationResult:
    rows: list[EvalRow]
    cells: list[CellRun]
    baselines: BaselineResult
    teacher: dict[str, dict[int, Interpretation]]
    splits: dict[str, str]

    @property
    def transcripts(self) -> list[SessionTranscript]:
        return [t for c in self.cells for t in c.transcripts]


def run_student_cells(config: RunConfig, splits: Mapping[str, str], teacher: Mapping, gateway: Gateway,
                      cache: Optional[ChartCache] = None) -> list[CellRun]:
    runs = []
    for backend in config.students:
        for cell in config.cells:
            try:
                transcripts = run_cell(config.cohort, splits, teacher, backend, cell, config.student, gateway, cache)
                runs.append(CellRun(backend.name, cell, transcripts))
            except (NephroError, ArithmeticError, ValueError) as exc:
                logger.error("cell %s/%s failed: %s", backend.name, cell.slug, exc)
                runs.append(CellRun(backend.name, cell, [], f"{type(exc).__name__}: {exc}"))
    return runs


def rows_for_cells(config: RunConfig, runs: Sequence[CellRun]) -> list[EvalRow]:
    labels = {b.name: b.label for b in config.students}
    rows = []
    for run in runs:
        model = labels.get(run.student, run.student)
        if run.error:
            rows.extend(failed_row(model, run.cell.label, split, run.error) for split in SPLITS)
        else:
            rows.extend(cell_rows(model, run.cell.label, run.transcripts))
    return rows


def execute(config: RunConfig, gateway: Optional[Gateway] = None, cache: Optional[ChartCache] = None) -> AblationResult:
    owned = gateway is None
    gateway = gateway or Gateway()
    cache = cache if cache is not None else ChartCache()
    try:
        splits = assign_splits(config.cohort, config.train_fraction, config.split_seed)
        teacher = {}
        if needs_teacher(config.cells):
            teacher = teacher_maps(config.cohort, config.teacher, gateway, cache)
        runs = run_student_cells(config, splits, teacher, gateway, cache)
    finally:
        if owned:
            gateway.close()
    base = run_baselines(config.cohort, splits, config.baselines, config.student.eval_steps)
    rows = rows_for_cells(config, runs) + baseline_rows(base.predictions, config.baselines.models)
    return AblationResult(rows, runs, base, teacher, splits)


def run_ablation(config: RunConfig, gateway: Optional[Gateway] = None) -> list[EvalRow]:
    return execute(config, gateway).rows


def transport_failures(rows: Sequence[EvalRow]) -> list[EvalRow]:
    return [r for r in rows if r.status == "failed" and r.error.startswith(BACKEND_ERROR_PREFIX)]

