"""Figures rendered next to emitted reports.

Reduced-resolution runs get two scatter panels (error plane and quality
plane); full-resolution runs get grouped bars of the aggregate indices.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .bench import MetricReport
from .core import ValidationError


def figure_path(report_path) -> Path:
    report_path = Path(report_path)
    return report_path.with_name(report_path.stem + "_figures.png")


def _scatter_panel(ax, report, x_col, y_col):
    for agg in report.aggregates:
        pts = [r.metrics for r in report.rows if r.method == agg.method]
        xs = [p[x_col] for p in pts]
        ys = [p[y_col] for p in pts]
        sc = ax.scatter(xs, ys, s=18, alpha=0.6, label=agg.method)
        ax.scatter(
            [agg.metrics[x_col]],
            [agg.metrics[y_col]],
            s=140,
            marker="*",
            edgecolors="black",
            linewidths=0.6,
            color=sc.get_facecolor()[0],
        )
    ax.set_xlabel(x_col)
    ax.set_ylabel(y_col)
    ax.grid(True, alpha=0.3)


def emit_figures(report: MetricReport, report_path) -> Path:
    """Render the companion figure for an already-emitted report."""
    if not report.rows:
        raise ValidationError("no scores to plot")
    out = figure_path(report_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    if report.protocol == "rr":
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4.2))
        _scatter_panel(ax1, report, "ergas", "sam_deg")
        ax1.set_title("global error vs spectral angle (lower-left is better)")
        _scatter_panel(ax2, report, "scc", "q_avg")
        ax2.set_title("spatial vs per-band quality (upper-right is better)")
        ax1.legend(loc="best", fontsize=8)
    else:
        fig, ax = plt.subplots(figsize=(7, 4.2))
        columns = report.columns
        methods = [a.method for a in report.aggregates]
        width = 0.8 / max(len(methods), 1)
        base = np.arange(len(columns))
        for i, agg in enumerate(report.aggregates):
            ax.bar(
                base + i * width,
                [agg.metrics[c] for c in columns],
                width=width,
                label=agg.method,
            )
        ax.set_xticks(base + width * (len(methods) - 1) / 2)
        ax.set_xticklabels(columns)
        ax.set_ylabel("aggregate value")
        ax.set_title("no-reference indices by method")
        ax.grid(True, axis="y", alpha=0.3)
        ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out
