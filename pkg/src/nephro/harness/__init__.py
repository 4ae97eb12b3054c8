"""Metrics, the ablation grid and report emission."""

from nephro.harness.ablation import (
    DEFAULT_CELLS,
    AblationCell,
    AblationResult,
    BaselineSettings,
    EvalRow,
    RunConfig,
    StudentSettings,
    execute,
    run_ablation,
    transport_failures,
)
from nephro.harness.metrics import mae, mape, mse
from nephro.harness.report import CAVEAT, MD_HEADER, render_report, render_table_csv, render_table_md

__all__ = [
    "AblationCell",
    "AblationResult",
    "BaselineSettings",
    "CAVEAT",
    "DEFAULT_CELLS",
    "EvalRow",
    "MD_HEADER",
    "RunConfig",
    "StudentSettings",
    "execute",
    "mae",
    "mape",
    "mse",
    "render_report",
    "render_table_csv",
    "render_table_md",
    "run_ablation",
    "transport_failures",
]
