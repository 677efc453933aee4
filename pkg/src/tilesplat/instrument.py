"""Per-stage wall-clock accounting and breakdown tables."""

from __future__ import annotations

import csv
import enum
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

from .errors import NegativeUnaccounted, NestedStage

CLOCK_RESOLUTION = 1e-6


class StageId(enum.Enum):
    ProjectionForward = "Projection Forward"
    IndexOffset = "Index Offset"
    GenerateKeys = "Generate Keys"
    Sorting = "Sorting"
    TileRanges = "Tile Ranges"
    RasterizationForward = "Rasterization Forward"
    CopyImageToDevice = "Copy Image to Device"
    LossGradient = "Loss Gradient"
    RasterizationBackward = "Rasterization Backward"
    ProjBwdOptimizer = "Proj Bwd + Optimizer"
    Densification = "Densification"

    @property
    def label(self) -> str:
        return self.value

    @classmethod
    def from_label(cls, label: str) -> StageId:
        for stage in cls:
            if label in (stage.value, stage.name):
                return stage
        raise KeyError(label)


TILING_SORTING = (StageId.IndexOffset, StageId.GenerateKeys, StageId.Sorting, StageId.TileRanges)
LOSS = (StageId.CopyImageToDevice, StageId.LossGradient)
UNACCOUNTED = "Unaccounted"
TOTAL = "Total"


@dataclass(frozen=True)
class StageBreakdown:
    seconds: Mapping[StageId, float]
    total_seconds: float

    @property
    def stage_sum(self) -> float:
        return sum(self.seconds.get(s, 0.0) for s in StageId)

    @property
    def unaccounted_seconds(self) -> float:
        return self.total_seconds - self.stage_sum

    def rows(self) -> list[tuple[str, float]]:
        """Rows in table order, ending with Unaccounted and Total."""
        out = [(s.label, self.seconds.get(s, 0.0)) for s in StageId]
        out.append((UNACCOUNTED, self.unaccounted_seconds))
        out.append((TOTAL, self.total_seconds))
        return out

    @classmethod
    def from_rows(cls, rows: Mapping[str, float]) -> StageBreakdown:
        """Build from labelled rows; a supplied Unaccounted row is ignored and recomputed."""
        seconds = {StageId.from_label(k): float(v) for k, v in rows.items() if k not in (UNACCOUNTED, TOTAL)}
        if TOTAL in rows:
            total = float(rows[TOTAL])
        else:
            total = sum(seconds.values()) + float(rows.get(UNACCOUNTED, 0.0))
        return cls(seconds, total)


class StageClock:
    """Accumulates wall time per stage; stages may not nest or overlap."""

    def __init__(self, clock: Callable[[], float] = time.perf_counter):
        self.clock = clock
        self.buckets = {s: 0.0 for s in StageId}
        self.calls = {s: 0 for s in StageId}
        self._open: StageId | None = None

    def now(self) -> float:
        return self.clock()

    @contextmanager
    def stage(self, stage: StageId):
        if self._open is not None:
            raise NestedStage(f"{stage.label} opened while {self._open.label} is running")
        self._open = stage
        start = self.clock()
        try:
            yield
        finally:
            self.buckets[stage] += self.clock() - start
            self.calls[stage] += 1
            self._open = None

    def finalize(self, total_seconds: float) -> StageBreakdown:
        staged = sum(self.buckets.values())
        if total_seconds < staged - CLOCK_RESOLUTION:
            raise NegativeUnaccounted(f"total {total_seconds:.6f}s is below staged time {staged:.6f}s")
        return StageBreakdown(dict(self.buckets), max(total_seconds, staged))


def with_stage(clock: StageClock, stage: StageId, work: Callable, *args, **kwargs):
    with clock.stage(stage):
        return work(*args, **kwargs)


def finalize(clock: StageClock, total_seconds: float) -> StageBreakdown:
    return clock.finalize(total_seconds)


def group_rows(b: StageBreakdown) -> list[tuple[str, float]]:
    """Grouped view: the four binning stages fold into Tiling/Sorting, upload and
    loss gradient fold into Loss; everything else passes through."""
    s = b.seconds
    return [
        (StageId.ProjectionForward.label, s.get(StageId.ProjectionForward, 0.0)),
        ("Tiling/Sorting", sum(s.get(x, 0.0) for x in TILING_SORTING)),
        (StageId.RasterizationForward.label, s.get(StageId.RasterizationForward, 0.0)),
        ("Loss", sum(s.get(x, 0.0) for x in LOSS)),
        (StageId.RasterizationBackward.label, s.get(StageId.RasterizationBackward, 0.0)),
        (StageId.ProjBwdOptimizer.label, s.get(StageId.ProjBwdOptimizer, 0.0)),
        (StageId.Densification.label, s.get(StageId.Densification, 0.0)),
        (UNACCOUNTED, b.unaccounted_seconds),
        (TOTAL, b.total_seconds),
    ]


def render_breakdown_table(columns: Mapping[str, StageBreakdown], grouped: bool = False, decimals: int = 1) -> str:
    """Text table with one column per scene, rows in stage order."""
    names = list(columns)
    per_col = {n: dict(group_rows(b) if grouped else b.rows()) for n, b in columns.items()}
    labels = list(per_col[names[0]]) if names else []
    label_w = max([len(x) for x in labels] + [5])
    cells = {n: [f"{per_col[n][lab]:.{decimals}f}" for lab in labels] for n in names}
    widths = {n: max(len(n), *(len(c) for c in cells[n])) for n in names}
    lines = ["".ljust(label_w) + " | " + " | ".join(n.rjust(widths[n]) for n in names)]
    rule = "-" * len(lines[0])
    lines.append(rule)
    for i, lab in enumerate(labels):
        if lab == TOTAL:
            lines.append(rule)
        lines.append(lab.ljust(label_w) + " | " + " | ".join(cells[n][i].rjust(widths[n]) for n in names))
    return "\n".join(lines) + "\n"


def write_breakdown_csv(b: StageBreakdown, path, scene: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scene", "stage", "seconds"] if scene is not None else ["stage", "seconds"])
        for label, sec in b.rows():
            row = [label, f"{sec:.6f}"]
            writer.writerow([scene, *row] if scene is not None else row)


def write_breakdowns_csv(columns: Mapping[str, StageBreakdown], path) -> None:
    """Long-format CSV holding several scenes, readable by :func:`read_breakdown_csv`."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scene", "stage", "seconds"])
        for scene, b in columns.items():
            writer.writerows([scene, label, f"{sec:.6f}"] for label, sec in b.rows())


def read_breakdown_csv(path) -> dict[str, StageBreakdown]:
    """Read one or more breakdowns; files without a scene column map to the parent directory name."""
    cols: dict[str, dict[str, float]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            scene = row.get("scene") or Path(path).parent.name or Path(path).stem
            cols.setdefault(scene, {})[row["stage"]] = float(row["seconds"])
    return {scene: StageBreakdown.from_rows(rows) for scene, rows in cols.items()}
