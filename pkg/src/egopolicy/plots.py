"""Static SVG figures for experiment CSVs.

Charts are deliberately plain: one bar per condition with a SEM error bar.
Output is deterministic (fixed hash salt, no embedded timestamps) so
repeated runs of the same study produce identical artifacts.
"""

from __future__ import annotations

import csv
import io

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

plt.rcParams["svg.hashsalt"] = "egopolicy"


def render_bars(labels, means, sems, out_path: str, title: str = "", ylabel: str = "score") -> None:
    fig, ax = plt.subplots(figsize=(0.9 + 1.1 * len(labels), 3.2))
    x = range(len(labels))
    ax.bar(x, means, yerr=sems, capsize=4, color="#4878a8", edgecolor="black", linewidth=0.6)
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel(ylabel)
    ax.set_ylim(0.0, 1.05)
    if title:
        ax.set_title(title, fontsize=10)
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    fig.tight_layout()
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    from .data import atomic_write_text

    atomic_write_text(out_path, buf.getvalue())


def render_csv(csv_path: str, out_path: str, title: str = "") -> None:
    """Bar chart from a results table whose last two columns are mean and SEM."""
    with open(csv_path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if len(rows) < 2 or len(rows[0]) < 3:
        raise ValueError(f"{csv_path}: expected a header plus rows of label,...,mean,sem")
    labels = [r[0] for r in rows[1:]]
    means = [float(r[-2]) for r in rows[1:]]
    sems = [float(r[-1]) for r in rows[1:]]
    render_bars(labels, means, sems, out_path, title=title)


def results_csv(rows_by_label: dict[str, list[float]], header_label: str) -> str:
    """Long-form results: one row per label, per-seed columns, then mean and SEM."""
    import math

    n_seeds = max(len(v) for v in rows_by_label.values())
    out = [f"{header_label}," + ",".join(f"seed{i}" for i in range(n_seeds)) + ",mean,sem"]
    for label, scores in rows_by_label.items():
        mean = sum(scores) / len(scores)
        if len(scores) > 1:
            var = sum((s - mean) ** 2 for s in scores) / (len(scores) - 1)
            sem = math.sqrt(var / len(scores))
        else:
            sem = 0.0
        cells = [label] + [repr(s) for s in scores] + [repr(mean), repr(sem)]
        out.append(",".join(cells))
    return "\n".join(out) + "\n"
