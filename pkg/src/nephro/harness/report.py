"""Results table, trajectory plots and example explanation cards."""

from __future__ import annotations

import csv
import io
import re
from collections import defaultdict
from pathlib import Path
from typing import Optional, Sequence

import matplotlib
import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from nephro.chartgen import encode_png, figure_rgb
from nephro.cohort import Cohort
from nephro.datablock import fmt_egfr
from nephro.harness.ablation import BASELINE_METHOD, BaselinePrediction, EvalRow
from nephro.student import DOC_OK, SessionTranscript

CAVEAT = (
    "Reproducing published benchmark numbers is out of scope: they rest on a private clinical "
    "dataset and proprietary models. Every figure here comes from this run's cohort and backends."
)
MD_HEADER = "| Model | Method | Train MAE | MAPE(%) | Val MAE | MAPE(%) |"
CSV_COLUMNS = (
    "model", "method", "train_mae", "train_mape_pct", "val_mae", "val_mape_pct",
    "train_mse", "val_mse", "train_n", "val_n", "train_imputed", "val_imputed", "status",
)
# preferred cell for the example card, most complete first
_CARD_METHOD_ORDER = (
    "knowledge transfer + short-term memory", "zero-shot + short-term memory", "knowledge transfer", "zero-shot",
)
_MARKERS = "sD^vP*Xh<>"


def slugify(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", text).strip("_").lower() or "model"


def table_entries(rows: Sequence[EvalRow]) -> list[dict]:
    """Merge train and validation rows into one entry per (model, method)."""
    order: list[tuple[str, str]] = []
    by_key: dict[tuple[str, str], dict[str, EvalRow]] = defaultdict(dict)
    for r in rows:
        key = (r.model_label, r.method_label)
        if key not in by_key:
            order.append(key)
        by_key[key][r.split] = r
    out = []
    for key in order:
        tr, va = by_key[key].get("train"), by_key[key].get("validation")
        statuses = sorted({r.status for r in (tr, va) if r is not None})
        out.append({"model": key[0], "method": key[1], "train": tr, "validation": va,
                    "status": "ok" if statuses == ["ok"] else "/".join(statuses)})
    return out


def _metric(row: Optional[EvalRow], attr: str, digits: int) -> str:
    if row is None:
        return ""
    if row.status == "failed":
        return "failed"
    value = getattr(row, attr)
    return "n/a" if value is None else f"{value:.{digits}f}"


def _method_cell(method: str) -> str:
    return "-" if method == BASELINE_METHOD else method


def render_table_md(rows: Sequence[EvalRow]) -> str:
    lines = [MD_HEADER, "|---|---|---:|---:|---:|---:|"]
    for e in table_entries(rows):
        tr, va = e["train"], e["validation"]
        cells = [e["model"], _method_cell(e["method"]), _metric(tr, "mae", 2), _metric(tr, "mape_pct", 2),
                 _metric(va, "mae", 2), _metric(va, "mape_pct", 2)]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines)


def render_table_csv(rows: Sequence[EvalRow]) -> str:
    buf = io.StringIO()
    buf.write(f"# {CAVEAT}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for e in table_entries(rows):
        tr, va = e["train"], e["validation"]
        writer.writerow([
            e["model"], _method_cell(e["method"]),
            _metric(tr, "mae", 4), _metric(tr, "mape_pct", 4), _metric(va, "mae", 4), _metric(va, "mape_pct", 4),
            _metric(tr, "mse", 4), _metric(va, "mse", 4),
            tr.n_predictions if tr else 0, va.n_predictions if va else 0,
            tr.n_imputed if tr else 0, va.n_imputed if va else 0,
            e["status"],
        ])
    return buf.getvalue()


def trajectory_plot(cohort: Cohort, patient_id: str, transcripts: Sequence[SessionTranscript],
                    baselines: Sequence[BaselinePrediction] = ()) -> bytes:
    """Measured eGFR with one marker series per (model, method); hollow markers are warm-ups."""
    patient = cohort.get(patient_id)
    obs = patient.observations
    x = np.array([o.date.toordinal() for o in obs], dtype=float)
    fig = Figure(figsize=(8, 5), dpi=100)
    FigureCanvasAgg(fig)
    ax = fig.add_axes((0.1, 0.14, 0.62, 0.78))
    ax.plot(x, [o.egfr for o in obs], color="black", marker="o", markersize=4, linewidth=1.5, label="measured")
    series = []
    for t in transcripts:
        pts = [(obs[s.outcome.history_length].date.toordinal(), s.outcome.predicted_egfr, s.evaluated) for s in t.steps]
        series.append((f"{t.model_label}: {t.flags.label}", pts))
    by_model: dict[str, list] = defaultdict(list)
    for b in baselines:
        by_model[b.model].append((obs[b.history_length].date.toordinal(), b.predicted, True))
    series.extend(by_model.items())
    cmap = matplotlib.colormaps["tab10"]
    for i, (label, pts) in enumerate(series):
        color = cmap(i % 10)
        marker = _MARKERS[i % len(_MARKERS)]
        for evaluated in (True, False):
            sel = [(px, py) for px, py, ev in pts if ev == evaluated]
            if not sel:
                continue
            ax.plot([p[0] for p in sel], [p[1] for p in sel], linestyle="none", marker=marker, markersize=7,
                    color=color, markerfacecolor=color if evaluated else "none")
        ax.plot([], [], linestyle="none", marker=marker, color=color, label=label)
    ax.set_xlim(x[0] - 20, x[-1] + 20)
    ticks = np.linspace(0, len(obs) - 1, min(len(obs), 5)).round().astype(int)
    ax.set_xticks(x[ticks], [obs[i].date.isoformat() for i in ticks], rotation=30, ha="right")
    ax.set_ylabel("eGFR (mL/min/1.73m²)")
    ax.set_title(f"Patient {patient_id}: predicted vs measured", y=1.01)
    ax.grid(True, color="#dddddd", linewidth=0.8)
    ax.legend(loc="upper left", bbox_to_anchor=(1.01, 1.0), fontsize=7, frameon=False)
    return encode_png(figure_rgb(fig))


def _card_choice(transcripts: Sequence[SessionTranscript]) -> Optional[tuple[SessionTranscript, object]]:
    def rank(t: SessionTranscript):
        method = t.flags.label
        m = _CARD_METHOD_ORDER.index(method) if method in _CARD_METHOD_ORDER else len(_CARD_METHOD_ORDER)
        return (m, 0 if t.split == "validation" else 1, t.patient_id)

    fallback = None
    for t in sorted(transcripts, key=rank):
        for step in t.evaluated_steps:
            if step.explanation.status == DOC_OK:
                return t, step
            fallback = fallback or (t, step)
    return fallback


def example_card(transcript: SessionTranscript, step, plot_link: Optional[str] = None) -> str:
    o = step.outcome
    doc = step.explanation
    lines = [
        f"### {transcript.model_label} ({transcript.flags.label})",
        "",
        f"Patient {transcript.patient_id}, {transcript.split or 'unsplit'} split.",
        "",
    ]
    if plot_link:
        lines += [f"![trajectory]({plot_link})", ""]
    lines += [
        f"Predicted eGFR for {o.target_date.isoformat()}: **{fmt_egfr(o.predicted_egfr)}** "
        f"(measured {fmt_egfr(step.ground_truth)}, parse status {o.parse_status})",
        "",
    ]
    if o.reasoning:
        lines += [f"Reasoning: {o.reasoning}", ""]
    lines += ["**Selective abduction (observed data)**", ""]
    lines += [f"- {i.variable_name}: {i.observed_value_or_trend} ({i.contribution_direction})"
              for i in doc.selective_items] or ["- none"]
    lines += ["", "**Creative abduction (unobserved hypotheses)**", ""]
    lines += [f"- {i.hypothesis_text}" for i in doc.creative_items] or ["- none"]
    lines += ["", f"**Linkage:** {doc.linkage or 'n/a'}"]
    if doc.violations:
        lines += ["", "Validator flags: " + "; ".join(doc.violations)]
    return "\n".join(lines) + "\n"


def render_report(rows: Sequence[EvalRow], transcripts: Sequence[SessionTranscript], out_dir: Path,
                  cohort: Optional[Cohort] = None, baselines: Sequence[BaselinePrediction] = ()) -> dict[str, Path]:
    """Write report.csv, report.md, plots/ and cards/ under ``out_dir``; returns the written paths."""
    if not rows:
        raise ValueError("render_report needs at least one row")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}

    csv_path = out_dir / "report.csv"
    csv_path.write_text(render_table_csv(rows), encoding="utf-8")
    written["report.csv"] = csv_path

    plot_links: dict[str, str] = {}
    if cohort is not None:
        by_patient: dict[str, list[SessionTranscript]] = defaultdict(list)
        for t in transcripts:
            by_patient[t.patient_id].append(t)
        base_by_patient: dict[str, list[BaselinePrediction]] = defaultdict(list)
        for b in baselines:
            base_by_patient[b.patient_id].append(b)
        for pid in sorted(set(by_patient) | set(base_by_patient)):
            path = out_dir / "plots" / f"{pid}.png"
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(trajectory_plot(cohort, pid, by_patient[pid], base_by_patient[pid]))
            plot_links[pid] = f"plots/{pid}.png"
            written[f"plots/{pid}.png"] = path

    cards = []
    by_model: dict[str, list[SessionTranscript]] = defaultdict(list)
    for t in transcripts:
        by_model[t.model_label].append(t)
    for model in sorted(by_model):
        choice = _card_choice(by_model[model])
        if choice is None:
            continue
        t, step = choice
        path = out_dir / "cards" / f"{slugify(model)}.md"
        path.parent.mkdir(parents=True, exist_ok=True)
        link = plot_links.get(t.patient_id)
        path.write_text(example_card(t, step, f"../{link}" if link else None), encoding="utf-8")
        written[f"cards/{path.name}"] = path
        cards.append(example_card(t, step, link))

    md = ["# eGFR forecasting report", "", f"> {CAVEAT}", "", "## Results", "", render_table_md(rows), "",
          "MAE in mL/min/1.73m². MSE and prediction counts are in report.csv."]
    failed = [r for r in rows if r.status == "failed"]
    if failed:
        md += ["", "Failed rows:", ""]
        md += [f"- {r.model_label} / {r.method_label} / {r.split}: {r.error}" for r in failed]
    if plot_links:
        md += ["", "## Trajectory plots", ""]
        md += [f"- [{pid}]({link})" for pid, link in sorted(plot_links.items())]
    if cards:
        md += ["", "## Example explanations", ""]
        md += cards
    md_path = out_dir / "report.md"
    md_path.write_text("\n".join(md).rstrip("\n") + "\n", encoding="utf-8")
    written["report.md"] = md_path
    return written
