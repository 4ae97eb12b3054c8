"""File-backed pipeline stages under ``<root>/<run_id>/``.

Each stage reads only what earlier stages wrote, so running the stages one
by one gives the same bytes as ``run-all``. A stage is complete when its
marker exists under ``stages/``. Transport failures do not stop a stage:
affected cells are recorded as failed and the caller decides the exit code.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path
from typing import Callable, Optional

from nephro import config as cfg
from nephro.chartgen import ChartCache, build_series, image_digest, write_series
from nephro.cohort import Cohort, load_cohort, median_obs_count, synth_cohort, write_cohort
from nephro.errors import StageError, ValidationError
from nephro.gateway import Gateway
from nephro.harness.ablation import (
    BaselinePrediction,
    CellRun,
    EvalRow,
    RunConfig,
    assign_splits,
    baseline_rows,
    needs_teacher,
    rows_for_cells,
    run_baselines,
    run_cell,
    teacher_maps,
)
from nephro.harness.report import render_report
from nephro.student import SessionTranscript
from nephro.teacher import load_teacher_map, save_teacher_map

logger = logging.getLogger(__name__)

STAGES = ("cohort", "charts", "teach", "predict", "baseline", "evaluate", "report")
_FAILED_CELL = "_failed.json"


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


class RunDir:
    def __init__(self, config: dict):
        self.path = Path(config["output"]["root"]) / str(config["output"]["run_id"])

    cohort_csv = property(lambda self: self.path / "cohort.csv")
    split_json = property(lambda self: self.path / "split.json")
    charts = property(lambda self: self.path / "charts")
    teacher = property(lambda self: self.path / "teacher")
    student = property(lambda self: self.path / "student")
    baselines = property(lambda self: self.path / "baselines")
    eval_rows = property(lambda self: self.path / "eval_rows.json")

    def marker(self, stage: str) -> Path:
        return self.path / "stages" / f"{stage}.done"

    def done(self, stage: str) -> bool:
        return self.marker(stage).is_file()

    def mark(self, stage: str, summary: dict) -> None:
        path = self.marker(stage)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(_dump(summary), encoding="utf-8")

    def require(self, *stages: str) -> None:
        for stage in stages:
            if not self.done(stage):
                hint = "synth or ingest" if stage == "cohort" else stage
                raise StageError(stage, f"run '{hint}' first")


@dataclasses.dataclass
class Context:
    config: dict
    run: RunDir
    gateway: Gateway
    _cohort: Optional[Cohort] = None
    _cache: Optional[ChartCache] = None

    @classmethod
    def create(cls, config: dict, gateway: Optional[Gateway] = None) -> "Context":
        return cls(config, RunDir(config), gateway or Gateway())

    @property
    def cohort(self) -> Cohort:
        if self._cohort is None:
            self.run.require("cohort")
            self._cohort = load_cohort(self.run.cohort_csv)
        return self._cohort

    @property
    def splits(self) -> dict[str, str]:
        return json.loads(self.run.split_json.read_text(encoding="utf-8"))["assignment"]

    @property
    def cache(self) -> ChartCache:
        """Chart cache seeded from the charts stage, so later stages reuse its bytes."""
        if self._cache is None:
            c = self.config["chartgen"]
            cache = ChartCache(int(c["width_px"]), int(c["height_px"]))
            if self.run.done("charts"):
                for patient in self.cohort:
                    folder = self.run.charts / patient.id
                    for path in sorted(folder.glob("prefix_*.png")):
                        k = int(path.stem.split("_")[1])
                        cache.put(cache.spec_for(patient, k), path.read_bytes())
            self._cache = cache
        return self._cache

    def run_config(self) -> RunConfig:
        c = self.config
        return RunConfig(
            cohort=self.cohort,
            students=cfg.student_backends(c),
            teacher=cfg.teacher_config(c),
            cells=cfg.cells(c),
            train_fraction=float(c["split"]["train_fraction"]),
            split_seed=int(c["split"]["seed"]),
            student=cfg.student_settings(c),
            baselines=cfg.baseline_settings(c),
            run_id=str(c["output"]["run_id"]),
        )


# -- stages -----------------------------------------------------------------


def _write_cohort_stage(ctx: Context, cohort: Cohort) -> dict:
    run = ctx.run
    run.path.mkdir(parents=True, exist_ok=True)
    write_cohort(cohort, run.cohort_csv)
    # downstream stages see the canonical CSV form, so split the reloaded cohort
    canonical = load_cohort(run.cohort_csv)
    split = ctx.config["split"]
    assignment = assign_splits(canonical, float(split["train_fraction"]), int(split["seed"]))
    run.split_json.write_text(_dump({
        "train_fraction": split["train_fraction"], "seed": split["seed"], "assignment": assignment,
    }), encoding="utf-8")
    ctx._cohort = canonical
    return {"patients": len(canonical), "observations": canonical.n_observations, "provenance": cohort.provenance}


def stage_synth(ctx: Context) -> dict:
    return _write_cohort_stage(ctx, synth_cohort(cfg.synth_config(ctx.config)))


def stage_ingest(ctx: Context) -> dict:
    path = ctx.config["cohort"]["csv_path"]
    if not path:
        raise ValidationError("cohort.csv_path is not set")
    return _write_cohort_stage(ctx, load_cohort(Path(path)))


def stage_charts(ctx: Context) -> dict:
    ctx.run.require("cohort")
    cohort = ctx.cohort
    m = median_obs_count(cohort)
    manifest = {}
    for patient in cohort:
        series = build_series(patient, m, ctx.cache)
        write_series(series, ctx.run.charts)
        manifest[patient.id] = {
            "m_p": series.m_p,
            "prefix_lengths": series.prefix_lengths,
            "sha256": [image_digest(c.image) for c in series.charts],
        }
    (ctx.run.charts / "manifest.json").write_text(_dump({"M": m, "patients": manifest}), encoding="utf-8")
    return {"M": m, "charts": sum(len(v["prefix_lengths"]) for v in manifest.values())}


def stage_teach(ctx: Context) -> dict:
    ctx.run.require("charts")
    if not needs_teacher(cfg.cells(ctx.config)):
        return {"skipped": "no knowledge-transfer cell in ablation.cells"}
    maps = teacher_maps(ctx.cohort, cfg.teacher_config(ctx.config), ctx.gateway, ctx.cache)
    degraded = 0
    for pid, mp in maps.items():
        save_teacher_map(ctx.run.teacher, pid, mp)
        degraded += sum(i.degraded for i in mp.values())
    return {"interpretations": sum(len(m) for m in maps.values()), "degraded": degraded}


def _cell_dir(ctx: Context, student: str, cell_slug: str) -> Path:
    return ctx.run.student / student / cell_slug


def stage_predict(ctx: Context) -> dict:
    cells = cfg.cells(ctx.config)
    ctx.run.require("charts", *(("teach",) if needs_teacher(cells) else ()))
    rc = ctx.run_config()
    teacher = {}
    if needs_teacher(cells):
        teacher = {p.id: load_teacher_map(ctx.run.teacher, p.id) for p in ctx.cohort}
    splits = ctx.splits
    summary = {}
    for backend in rc.students:
        for cell in rc.cells:
            folder = _cell_dir(ctx, backend.name, cell.slug)
            folder.mkdir(parents=True, exist_ok=True)
            (folder / _FAILED_CELL).unlink(missing_ok=True)
            try:
                transcripts = run_cell(rc.cohort, splits, teacher, backend, cell, rc.student, ctx.gateway, ctx.cache)
            except (ValidationError, ArithmeticError, ValueError) as exc:
                (folder / _FAILED_CELL).write_text(_dump({"error": f"{type(exc).__name__}: {exc}"}), encoding="utf-8")
                summary[f"{backend.name}/{cell.slug}"] = "failed"
                continue
            for t in transcripts:
                t.save(folder / f"{t.patient_id}.json")
            summary[f"{backend.name}/{cell.slug}"] = len(transcripts)
    return summary


def stage_baseline(ctx: Context) -> dict:
    ctx.run.require("cohort")
    rc = ctx.run_config()
    result = run_baselines(rc.cohort, ctx.splits, rc.baselines, rc.student.eval_steps)
    ctx.run.baselines.mkdir(parents=True, exist_ok=True)
    if result.forest is not None:
        result.forest.save(ctx.run.baselines / "rf_model.json")
    (ctx.run.baselines / "predictions.json").write_text(
        _dump({"train_patient_ids": list(result.train_patient_ids),
               "predictions": [p.to_dict() for p in result.predictions]}),
        encoding="utf-8",
    )
    return {"predictions": len(result.predictions)}


def load_cell_runs(ctx: Context) -> list[CellRun]:
    rc_students = cfg.student_backends(ctx.config)
    runs = []
    for backend in rc_students:
        for cell in cfg.cells(ctx.config):
            folder = _cell_dir(ctx, backend.name, cell.slug)
            failed = folder / _FAILED_CELL
            if failed.is_file():
                runs.append(CellRun(backend.name, cell, [], json.loads(failed.read_text(encoding="utf-8"))["error"]))
                continue
            transcripts = [SessionTranscript.load(folder / f"{p.id}.json") for p in ctx.cohort
                           if (folder / f"{p.id}.json").is_file()]
            runs.append(CellRun(backend.name, cell, transcripts))
    return runs


def load_baseline_predictions(ctx: Context) -> list[BaselinePrediction]:
    data = json.loads((ctx.run.baselines / "predictions.json").read_text(encoding="utf-8"))
    return [BaselinePrediction(**d) for d in data["predictions"]]


def stage_evaluate(ctx: Context) -> dict:
    ctx.run.require("predict", "baseline")
    rc = ctx.run_config()
    rows = rows_for_cells(rc, load_cell_runs(ctx))
    rows += baseline_rows(load_baseline_predictions(ctx), rc.baselines.models)
    ctx.run.eval_rows.write_text(_dump([r.to_dict() for r in rows]), encoding="utf-8")
    return {"rows": len(rows), "failed": sum(r.status == "failed" for r in rows)}


def stage_report(ctx: Context) -> dict:
    ctx.run.require("evaluate")
    rows = [EvalRow.from_dict(d) for d in json.loads(ctx.run.eval_rows.read_text(encoding="utf-8"))]
    transcripts = [t for run in load_cell_runs(ctx) for t in run.transcripts]
    written = render_report(rows, transcripts, ctx.run.path, ctx.cohort, load_baseline_predictions(ctx))
    return {"files": len(written)}


STAGE_FUNCS: dict[str, Callable[[Context], dict]] = {
    "synth": stage_synth,
    "ingest": stage_ingest,
    "charts": stage_charts,
    "teach": stage_teach,
    "predict": stage_predict,
    "baseline": stage_baseline,
    "evaluate": stage_evaluate,
    "report": stage_report,
}


def marker_name(command: str) -> str:
    return "cohort" if command in ("synth", "ingest") else command


@dataclasses.dataclass
class StageResult:
    command: str
    skipped: bool
    transport_failures: int
    summary: dict


def run_stage(ctx: Context, command: str, force: bool = False) -> StageResult:
    stage = marker_name(command)
    if ctx.run.done(stage) and not force:
        logger.info("stage %s skipped (outputs exist; use --force to rerun)", command)
        return StageResult(command, True, 0, {})
    before = ctx.gateway.transport_failures
    summary = STAGE_FUNCS[command](ctx)
    failures = ctx.gateway.transport_failures - before
    if failures:
        logger.error("stage %s hit %d transport failure(s)", command, failures)
        summary = {**summary, "transport_failures": failures}
    ctx.run.mark(stage, summary)
    logger.info("stage %s done: %s", command, json.dumps(summary, sort_keys=True))
    return StageResult(command, False, failures, summary)


def run_all(ctx: Context, force: bool = False) -> list[StageResult]:
    first = "ingest" if ctx.config["cohort"]["source"] == "csv" else "synth"
    results = []
    for command in (first, "charts", "teach", "predict", "baseline", "evaluate", "report"):
        results.append(run_stage(ctx, command, force))
    return results

