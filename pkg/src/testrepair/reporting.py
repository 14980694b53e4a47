"""Report rendering: plain-text tables, CSV, and figure files.

Every benchmark command writes the same bundle into its output directory:
a JSON report, a text table, a CSV of the raw rows, and a PNG chart. All
writes are atomic (temp file + rename) so an interrupted run never leaves a
half-written report.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .benchkit import (
    INSTRUCTION_DETAILED,
    INSTRUCTION_HIGH_LEVEL,
    MetricsRow,
    PatchGenReport,
    ProductionMetrics,
    SuiteReport,
    percent,
)
from .judge import JudgeEvaluation


def atomic_write_text(path: str | Path, content: str) -> None:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = target.with_name(target.name + ".tmp")
    tmp.write_text(content, encoding="utf-8")
    tmp.replace(target)


def atomic_write_json(path: str | Path, payload) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2) + "\n")


def _fmt_sr_columns(rows: list[MetricsRow]) -> list[int]:
    ks = sorted({k for row in rows for k in row.sr_at})
    return [k for k in ks if k == 1 or k == max(ks)] if len(ks) > 2 else ks


def render_metrics_table(rows: list[MetricsRow]) -> str:
    """Ablation-style table: one row per setup, SR/PGR/ER/IC columns."""
    ks = _fmt_sr_columns(rows)
    headers = ["Setup"] + [f"SR@{k}" for k in ks] + ["PGR avg", "ER avg", "IC mean", "IC med"]
    table = [headers]
    for row in rows:
        cells = [row.label]
        for k in ks:
            cells.append(percent(row.sr_at[k]) if k in row.sr_at else "-")
        cells.append(percent(row.pgr))
        cells.append(percent(row.er))
        cells.append(f"{row.ic_mean:.1f}")
        cells.append(f"{row.ic_median:.1f}")
        table.append(cells)
    widths = [max(len(r[i]) for r in table) for i in range(len(headers))]
    lines = []
    for i, row_cells in enumerate(table):
        lines.append("  ".join(c.ljust(w) for c, w in zip(row_cells, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def metrics_csv(rows: list[MetricsRow]) -> str:
    buf = io.StringIO()
    ks = sorted({k for row in rows for k in row.sr_at})
    writer = csv.writer(buf)
    writer.writerow(
        ["label", "n_examples", "trials"]
        + [f"sr_at_{k}" for k in ks]
        + ["pgr", "er", "ic_mean", "ic_median"]
    )
    for row in rows:
        writer.writerow(
            [row.label, row.n_examples, row.trials]
            + [f"{row.sr_at.get(k, '')}" for k in ks]
            + [row.pgr, row.er, row.ic_mean, row.ic_median]
        )
    return buf.getvalue()


def save_ablation_figure(rows: list[MetricsRow], path: str | Path) -> None:
    """Grouped bars of SR@1 / SR@max per setup."""
    ks = _fmt_sr_columns(rows)
    labels = [row.label for row in rows]
    x = range(len(rows))
    width = 0.8 / max(1, len(ks))
    fig, ax = plt.subplots(figsize=(max(6, 1.8 * len(rows)), 4))
    for i, k in enumerate(ks):
        values = [100 * row.sr_at.get(k, 0.0) for row in rows]
        offs = [xi + (i - (len(ks) - 1) / 2) * width for xi in x]
        ax.bar(offs, values, width=width, label=f"SR@{k}")
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("solve rate (%)")
    ax.set_ylim(0, 100)
    ax.legend()
    ax.set_title("Solve rate by feedback setup")
    fig.tight_layout()
    _save_figure(fig, path)


def patchgen_table(report: PatchGenReport) -> str:
    formats = sorted({r.format for r in report.records})
    buckets = sorted({r.size_bucket for r in report.records})
    headers = ["Format", "Level"] + buckets + ["all"]
    table = [headers]
    for fmt in formats:
        for level in (INSTRUCTION_HIGH_LEVEL, INSTRUCTION_DETAILED):
            rate = report.solve_rate(fmt=fmt, level=level)
            if rate is None:
                continue
            cells = [fmt, level]
            for bucket in buckets:
                sub = report.solve_rate(fmt=fmt, level=level, bucket=bucket)
                cells.append(percent(sub) if sub is not None else "-")
            cells.append(percent(rate))
            table.append(cells)
    widths = [max(len(r[i]) for r in table) for i in range(len(headers))]
    lines = []
    for i, row_cells in enumerate(table):
        lines.append("  ".join(c.ljust(w) for c, w in zip(row_cells, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def patchgen_csv(report: PatchGenReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["example_id", "format", "instruction_level", "size_bucket", "solved", "apply_error"])
    for r in report.records:
        writer.writerow([r.example_id, r.format, r.instruction_level, r.size_bucket, int(r.solved), r.apply_error or ""])
    return buf.getvalue()


def save_patchgen_figure(report: PatchGenReport, path: str | Path) -> None:
    formats = sorted({r.format for r in report.records})
    levels = [INSTRUCTION_HIGH_LEVEL, INSTRUCTION_DETAILED]
    fig, ax = plt.subplots(figsize=(max(6, 2 * len(formats)), 4))
    width = 0.35
    x = range(len(formats))
    for i, level in enumerate(levels):
        values = [100 * (report.solve_rate(fmt=f, level=level) or 0.0) for f in formats]
        offs = [xi + (i - 0.5) * width for xi in x]
        ax.bar(offs, values, width=width, label=level)
    ax.set_xticks(list(x))
    ax.set_xticklabels(formats)
    ax.set_ylabel("solve rate (%)")
    ax.set_ylim(0, 100)
    ax.legend()
    ax.set_title("Patch generation solve rate by format")
    fig.tight_layout()
    _save_figure(fig, path)


def judge_table(evaluation: JudgeEvaluation) -> str:
    lines = ["Class  Precision  Recall  Support"]
    lines.append("-" * len(lines[0]))
    for klass in (0, 1):
        precision = evaluation.metrics.precision.get(klass)
        recall = evaluation.metrics.recall.get(klass)
        support = evaluation.metrics.support.get(klass, 0)
        ptxt = f"{precision:.3f}" if precision is not None else "n/a"
        rtxt = f"{recall:.3f}" if recall is not None else "n/a"
        lines.append(f"{klass}      {ptxt:>9}  {rtxt:>6}  {support:>7}")
    if evaluation.unparseable:
        lines.append(f"unparseable verdicts (scored as class 0): {evaluation.unparseable}")
    return "\n".join(lines) + "\n"


def save_judge_figure(evaluation: JudgeEvaluation, path: str | Path) -> None:
    classes = [0, 1]
    precision = [evaluation.metrics.precision.get(c) or 0.0 for c in classes]
    recall = [evaluation.metrics.recall.get(c) or 0.0 for c in classes]
    x = range(len(classes))
    width = 0.35
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.bar([xi - width / 2 for xi in x], precision, width=width, label="precision")
    ax.bar([xi + width / 2 for xi in x], recall, width=width, label="recall")
    ax.set_xticks(list(x))
    ax.set_xticklabels([f"class {c}" for c in classes])
    ax.set_ylim(0, 1)
    ax.legend()
    ax.set_title("Judge precision/recall by class")
    fig.tight_layout()
    _save_figure(fig, path)


def production_table(metrics: ProductionMetrics) -> str:
    rendered = metrics.rendered()
    rows = [
        ("diffs published", str(metrics.published)),
        ("diffs reviewed", f"({rendered['review_rate']}) {metrics.reviewed}"),
        ("diffs landed", str(metrics.landed)),
        ("land rate of total", rendered["land_rate_total"]),
        ("land rate of reviewed", rendered["land_rate_reviewed"]),
    ]
    width = max(len(name) for name, _ in rows)
    return "\n".join(f"{name.ljust(width)}  {value}" for name, value in rows) + "\n"


def write_suite_report(report: SuiteReport, out_dir: str | Path) -> list[Path]:
    """Write the full bundle for a suite run; returns the paths written."""
    out = Path(out_dir)
    paths = {
        "json": out / "report.json",
        "table": out / "report.txt",
        "csv": out / "report.csv",
        "figure": out / "report.png",
    }
    atomic_write_json(paths["json"], report.to_json())
    atomic_write_text(paths["table"], render_metrics_table(report.rows))
    atomic_write_text(paths["csv"], metrics_csv(report.rows))
    save_ablation_figure(report.rows, paths["figure"])
    return list(paths.values())


def write_patchgen_report(report: PatchGenReport, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    paths = {
        "json": out / "patchgen.json",
        "table": out / "patchgen.txt",
        "csv": out / "patchgen.csv",
        "figure": out / "patchgen.png",
    }
    atomic_write_json(paths["json"], report.to_json())
    atomic_write_text(paths["table"], patchgen_table(report))
    atomic_write_text(paths["csv"], patchgen_csv(report))
    save_patchgen_figure(report, paths["figure"])
    return list(paths.values())


def write_judge_report(evaluation: JudgeEvaluation, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    paths = {
        "json": out / "judge_eval.json",
        "table": out / "judge_eval.txt",
        "figure": out / "judge_eval.png",
    }
    atomic_write_json(paths["json"], evaluation.to_json())
    atomic_write_text(paths["table"], judge_table(evaluation))
    save_judge_figure(evaluation, paths["figure"])
    return list(paths.values())


def _save_figure(fig, path: str | Path) -> None:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = target.with_name(target.name + ".tmp.png")
    fig.savefig(tmp, dpi=120)
    plt.close(fig)
    tmp.replace(target)
