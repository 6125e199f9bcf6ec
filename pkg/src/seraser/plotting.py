"""Report rendering: per-group CSV and a bar chart of group accuracies."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

CSV_FIELDS = ("method", "group", "correct", "total", "accuracy")


def write_group_csv(reports, path) -> Path:
    """One row per (method, group)."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_FIELDS)
        for report in reports:
            for group, g in report.per_group.items():
                writer.writerow([report.method, group, g["correct"], g["total"], f"{g['accuracy']:.6f}"])
    return path


def plot_group_accuracy(reports, path, title=None) -> Path:
    """Grouped bars: one cluster per group, one bar per method, W.G. marked per method."""
    path = Path(path)
    groups = sorted({g for r in reports for g in r.per_group})
    width = 0.8 / max(len(reports), 1)
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(groups) + 2), 3.5))
    for i, r in enumerate(reports):
        xs = [j + (i - (len(reports) - 1) / 2) * width for j in range(len(groups))]
        accs = [r.per_group.get(g, {}).get("accuracy", 0.0) for g in groups]
        bars = ax.bar(xs, accs, width, label=f"{r.method} (W.G. {r.worst_group_accuracy:.3f})")
        ax.axhline(r.worst_group_accuracy, color=bars.patches[0].get_facecolor(), lw=0.8, ls="--")
    ax.set_xticks(range(len(groups)))
    ax.set_xticklabels(groups, rotation=20, ha="right")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("accuracy")
    if title:
        ax.set_title(title)
    ax.legend(fontsize="small", loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
