"""Figures written next to the text tables by the report path."""

from __future__ import annotations

from collections import defaultdict
from typing import Mapping, Sequence

import numpy as np

from .instrument import StageBreakdown, StageId, UNACCOUNTED, group_rows
from .stats.intervals import mean_ci
from .stats.tables import METRIC_ROWS, ResultRecord

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_breakdown(columns: Mapping[str, StageBreakdown], path, grouped: bool = True) -> None:
    """Horizontal stacked bars, one per scene, segments per (grouped) stage."""
    plt = _pyplot()
    names = list(columns)
    rows = [group_rows(columns[n]) if grouped else columns[n].rows() for n in names]
    labels = [lab for lab, _ in rows[0] if lab != "Total"]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(6.5, 0.5 * len(names) + 1.6))
        left = np.zeros(len(names))
        cmap = plt.get_cmap("tab20")
        for i, lab in enumerate(labels):
            vals = np.array([dict(r)[lab] for r in rows])
            hatch = "//" if lab == UNACCOUNTED else None
            ax.barh(names, vals, left=left, color=cmap(i % 20), hatch=hatch, label=lab, edgecolor="white", linewidth=0.5)
            left += vals
        ax.set_xlabel("seconds")
        ax.invert_yaxis()
        ax.legend(ncol=3, loc="upper center", bbox_to_anchor=(0.5, -0.25), frameon=False)
        fig.savefig(path)
        plt.close(fig)


def plot_results(records: Sequence[ResultRecord], path, metrics: Sequence[str] = ("psnr", "ssim", "time_seconds", "peak_vram_gib")) -> None:
    """Per-scene mean with 90% interval whiskers, one panel per metric."""
    plt = _pyplot()
    samples: dict[str, dict[str, list[float]]] = defaultdict(lambda: defaultdict(list))
    for r in records:
        samples[r.metric][r.scene].append(r.value)
    metrics = [m for m in metrics if m in samples]
    labels = {key: label for key, label, _ in METRIC_ROWS}
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, max(len(metrics), 1), figsize=(2.4 * max(len(metrics), 1), 2.6), squeeze=False)
        for ax, metric in zip(axes[0], metrics):
            scenes = list(samples[metric])
            means, lo_err, hi_err = [], [], []
            for s in scenes:
                vals = samples[metric][s]
                m = float(np.mean(vals))
                lo, hi = mean_ci(vals) if len(vals) > 1 else (m, m)
                means.append(m)
                lo_err.append(m - lo)
                hi_err.append(hi - m)
            x = np.arange(len(scenes))
            ax.errorbar(x, means, yerr=[lo_err, hi_err], fmt="o", ms=4, capsize=3, color="k")
            ax.set_xticks(x, scenes, rotation=30, ha="right")
            ax.set_title(labels.get(metric, metric))
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_stage_shares(b: StageBreakdown, path) -> None:
    """Fraction of wall time per stage for a single run."""
    plt = _pyplot()
    labels = [s.label for s in StageId] + [UNACCOUNTED]
    vals = np.array([b.seconds.get(s, 0.0) for s in StageId] + [b.unaccounted_seconds])
    share = vals / max(b.total_seconds, 1e-12)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.barh(labels, share, color="0.35")
        ax.invert_yaxis()
        ax.set_xlabel("share of wall time")
        fig.savefig(path)
        plt.close(fig)
