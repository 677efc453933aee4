"""Results CSV ingestion and interval-notation result tables."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..errors import IncompleteGrid
from .intervals import IntervalCell

AVERAGE = "Average"
RESULTS_COLUMNS = ["run_id", "scene", "metric", "value"]

# (metric key in results CSV, table row label, rounding kind)
METRIC_ROWS = (
    ("psnr", "PSNR", "psnr"),
    ("ssim", "SSIM", "ssim"),
    ("time_seconds", "Time", "time_seconds"),
    ("total_vram_gib", "Total VRAM", "vram_gib"),
    ("peak_vram_gib", "Peak VRAM", "vram_gib"),
    ("num_gs_thousands", "NumGS", "num_gs_thousands"),
)
ROW_LABELS = {key: label for key, label, _ in METRIC_ROWS}
ROW_KINDS = {key: kind for key, _, kind in METRIC_ROWS}


@dataclass(frozen=True)
class ResultRecord:
    run_id: int
    scene: str
    metric: str
    value: float


def format_value(value: float) -> str:
    return repr(float(value))


def write_results_csv(records: Iterable[ResultRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULTS_COLUMNS)
        for r in records:
            writer.writerow([r.run_id, r.scene, r.metric, format_value(r.value)])


def read_results_csv(paths) -> list[ResultRecord]:
    if isinstance(paths, (str, Path)):
        paths = [paths]
    out = []
    for path in paths:
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                out.append(ResultRecord(int(row["run_id"]), row["scene"], row["metric"], float(row["value"])))
    return out


def summarize(
    records: Sequence[ResultRecord], level: float = 0.90, allow_single: bool = False
) -> tuple[dict[str, dict[str, IntervalCell]], list[str]]:
    """Reduce repeated runs to interval cells: ``grid[metric][column]``.

    The Average column averages each run across scenes first, then takes the
    interval of those per-run means.
    """
    scenes: list[str] = []
    by_key: dict[tuple[str, str], dict[int, float]] = defaultdict(dict)
    for r in records:
        if r.scene not in scenes:
            scenes.append(r.scene)
        by_key[(r.metric, r.scene)][r.run_id] = r.value
    metrics = [key for key, _, _ in METRIC_ROWS if any(m == key for m, _ in by_key)]
    if not metrics:
        raise IncompleteGrid("no known metrics in results")

    grid: dict[str, dict[str, IntervalCell]] = {}
    for metric in metrics:
        kind = ROW_KINDS[metric]
        runs_per_scene = []
        for scene in scenes:
            if (metric, scene) not in by_key:
                raise IncompleteGrid(f"metric {metric!r} missing for scene {scene!r}")
            runs_per_scene.append(by_key[(metric, scene)])
        run_ids = sorted(runs_per_scene[0])
        if any(sorted(r) != run_ids for r in runs_per_scene):
            raise IncompleteGrid(f"scenes disagree on the runs recorded for {metric!r}")
        row = {}
        for scene, runs in zip(scenes, runs_per_scene):
            row[scene] = IntervalCell.from_samples([runs[i] for i in run_ids], kind, level, allow_single)
        averages = [float(np.mean([runs[i] for runs in runs_per_scene])) for i in run_ids]
        row[AVERAGE] = IntervalCell.from_samples(averages, kind, level, allow_single)
        grid[metric] = row
    return grid, scenes + [AVERAGE]


def render_results_table(
    grid: Mapping[str, Mapping[str, IntervalCell]],
    columns: Sequence[str],
    rows: Sequence[str] | None = None,
    labels: Mapping[str, str] | None = None,
) -> str:
    labels = {**ROW_LABELS, **(labels or {})}
    rows = [key for key, _, _ in METRIC_ROWS if key in grid] if rows is None else list(rows)
    for key in rows:
        missing = [c for c in columns if c not in grid.get(key, {})]
        if missing:
            raise IncompleteGrid(f"row {key!r} lacks columns {missing}")
    body = [[labels.get(k, k)] + [grid[k][c].rendered for c in columns] for k in rows]
    header = [""] + list(columns)
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]

    def fmt(cells):
        return " | ".join(c.ljust(widths[0]) if i == 0 else c.rjust(widths[i]) for i, c in enumerate(cells))

    head = fmt(header)
    return "\n".join([head, "-" * len(head)] + [fmt(r) for r in body]) + "\n"


def parse_results_table(text: str) -> tuple[dict[str, dict[str, IntervalCell]], list[str]]:
    """Inverse of :func:`render_results_table` (row keys come back as labels)."""
    lines = [ln for ln in text.splitlines() if ln.strip() and not set(ln) <= {"-"}]
    header = [c.strip() for c in lines[0].split("|")]
    columns = header[1:]
    grid = {}
    for ln in lines[1:]:
        cells = [c.strip() for c in ln.split("|")]
        grid[cells[0]] = {col: IntervalCell.parse(cell) for col, cell in zip(columns, cells[1:])}
    return grid, columns


def grid_to_json(grid: Mapping[str, Mapping[str, IntervalCell]]) -> str:
    payload = {
        metric: {col: {"lower": c.lower, "upper": c.upper, "cell": c.rendered} for col, c in row.items()}
        for metric, row in grid.items()
    }
    return json.dumps(payload, indent=2) + "\n"
