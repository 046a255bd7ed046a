"""Figure rendering for the report paths.

Scoring and training both emit machine-readable files (JSON report, JSONL
metrics); these helpers render the companion PNGs next to them. Everything
uses the Agg backend so the CLI works headless.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def render_score_figures(report: dict, report_path) -> list[Path]:
    """Histogram of per-sample scores plus bucket means, next to the report."""
    stem = Path(report_path).with_suffix("")
    outpaths: list[Path] = []
    per_sample = report.get("per_sample", [])

    hist_path = Path(f"{stem}_hist.png")
    fig, ax = plt.subplots(figsize=(6, 4))
    values = [row["teds"] for row in per_sample]
    struct_values = [row["teds_struct"] for row in per_sample]
    bins = [i / 20 for i in range(21)]
    ax.hist(values, bins=bins, alpha=0.6, label="TEDS")
    ax.hist(struct_values, bins=bins, alpha=0.6, label="TEDS-struct")
    ax.set_xlabel("score")
    ax.set_ylabel("samples")
    ax.set_title(f"Per-sample scores (n={report.get('n', len(per_sample))})")
    ax.legend(loc="upper left")
    fig.tight_layout()
    fig.savefig(hist_path, dpi=120)
    plt.close(fig)
    outpaths.append(hist_path)

    bucket_path = Path(f"{stem}_buckets.png")
    fig, ax = plt.subplots(figsize=(6, 4))
    labels = ["simple", "complex", "all"]
    teds_means = [report["teds"][k] for k in labels]
    struct_means = [report["teds_struct"][k] for k in labels]
    xs = range(len(labels))
    width = 0.38
    ax.bar([x - width / 2 for x in xs], [v or 0.0 for v in teds_means], width, label="TEDS")
    ax.bar(
        [x + width / 2 for x in xs],
        [v or 0.0 for v in struct_means],
        width,
        label="TEDS-struct",
    )
    ax.set_xticks(list(xs), labels)
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("mean score")
    ax.set_title("Bucket means")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(bucket_path, dpi=120)
    plt.close(fig)
    outpaths.append(bucket_path)
    return outpaths


def render_training_curves(metrics_path, out_path=None) -> Path:
    """Loss and component curves from a metrics log."""
    metrics_path = Path(metrics_path)
    if out_path is None:
        out_path = metrics_path.with_name("loss_curve.png")
    steps, losses, l_struc, l_cell = [], [], [], []
    with open(metrics_path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            if "l_struc" not in row:  # epoch summary line
                continue
            steps.append(row["step"])
            losses.append(row["loss"])
            l_struc.append(row["l_struc"])
            l_cell.append(row["l_cell"])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, losses, label="total", linewidth=1.5)
    ax.plot(steps, l_struc, label="structure", linewidth=0.8, alpha=0.8)
    ax.plot(steps, l_cell, label="cell", linewidth=0.8, alpha=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.set_title("Training loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)
