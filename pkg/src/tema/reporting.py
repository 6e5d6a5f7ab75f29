"""Report rendering: tab-separated tables, JSON documents, and figures.

Every report path emits delimited text first (stdout and files); when an
output directory is given, a matplotlib figure is rendered next to each
table. Figures are written through the Agg backend so headless runs work.
"""

from __future__ import annotations

import json
from pathlib import Path


def format_value(value) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def format_table(rows, headers) -> str:
    """Tab-separated table with a header line."""
    lines = ["\t".join(headers)]
    for row in rows:
        lines.append("\t".join(format_value(v) for v in row))
    return "\n".join(lines)


def metrics_rows(report):
    return [
        (r["split"], r["category"], r["metric"], r["value"])
        for r in report.to_records()
    ]


def format_metrics(report) -> str:
    return format_table(metrics_rows(report), ("split", "category", "metric", "value"))


def format_stats(stats) -> str:
    """Length statistics in the #Minimal / #Maximal / #Average column layout."""
    rows = [
        (split, s.minimal, s.maximal, f"{s.average:.1f}")
        for split, s in sorted(stats.per_split.items())
    ]
    return format_table(rows, ("split", "#Minimal", "#Maximal", "#Average"))


def format_history(history) -> str:
    rows = [
        (i, b.bbc, b.summ, b.ortho, b.total) for i, b in enumerate(history)
    ]
    return format_table(rows, ("step", "bbc", "summ", "ortho", "total"))


def write_text(path, text: str) -> None:
    Path(path).write_text(text + "\n", encoding="utf-8")


def write_json(path, payload) -> None:
    Path(path).write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


# --------------------------------------------------------------------------
# figures
# --------------------------------------------------------------------------


def _pyplot():
    import matplotlib

    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    return plt


def save_loss_figure(history, path) -> None:
    plt = _pyplot()
    steps = list(range(len(history)))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, [b.total for b in history], label="total")
    ax.plot(steps, [b.bbc for b in history], label="batch classification")
    ax.plot(steps, [b.summ for b in history], label="distillation")
    ax.plot(steps, [b.ortho for b in history], label="orthogonality")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_metrics_figure(report, path) -> None:
    plt = _pyplot()
    records = [r for r in report.to_records() if r["split"] or r["category"]]
    labels = [
        "/".join(filter(None, (r["split"], r["category"], r["metric"])))
        for r in records
    ]
    values = [r["value"] for r in records]
    fig, ax = plt.subplots(figsize=(max(6, 0.6 * len(labels)), 4))
    ax.bar(range(len(values)), values)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=60, ha="right", fontsize=7)
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("recall")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_sweep_figure(values, series, path, xlabel) -> None:
    """Line plot of one or more metric series against the swept values."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, ys in series.items():
        ax.plot(values, ys, marker="o", label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("value")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
