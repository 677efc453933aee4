"""Confidence intervals of the mean, metric rounding, and interval notation.

Interval notation writes the shared leading characters of the two bounds once
and brackets the differing tails: ``("25.48", "25.54") -> "25.[48-54]"``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

import numpy as np
from scipy import stats as _scistats

from ..errors import InvalidOrder, TooFewSamples

DECIMALS = {
    "psnr": 2,
    "ssim": 3,
    "lpips": 3,
    "time_seconds": 0,
    "vram_gib": 2,
    "num_gs_thousands": 0,
}


def mean_ci(samples, level: float = 0.90) -> tuple[float, float]:
    """Two-sided Student-t confidence interval of the mean."""
    x = np.asarray(samples, dtype=np.float64)
    n = x.size
    if n < 2:
        raise TooFewSamples(f"need at least 2 samples for a confidence interval, got {n}")
    if not np.all(np.isfinite(x)):
        raise ValueError("samples must be finite")
    mean = float(np.mean(x))
    sd = float(np.std(x, ddof=1))
    if sd == 0.0:
        return mean, mean
    half = float(_scistats.t.ppf((1 + level) / 2, n - 1)) * sd / math.sqrt(n)
    return mean - half, mean + half


def round_metric(value: float, kind: str) -> str:
    """Round half away from zero to the display precision of ``kind``."""
    if not math.isfinite(value):
        raise ValueError(f"cannot round non-finite {value!r}")
    places = DECIMALS[kind]
    quantum = Decimal(1).scaleb(-places)
    out = Decimal(repr(float(value))).quantize(quantum, rounding=ROUND_HALF_UP)
    if out == 0:
        out = abs(out)  # no "-0.00"
    return f"{out:.{places}f}"


def interval_notation(lower: str, upper: str) -> str:
    if float(lower) > float(upper):
        raise InvalidOrder(f"lower bound {lower} exceeds upper bound {upper}")
    if lower == upper:
        return lower
    n = 0
    while n < min(len(lower), len(upper)) and lower[n] == upper[n]:
        n += 1
    # both tails must be non-empty for the cell to parse back unambiguously
    n = min(n, len(lower) - 1, len(upper) - 1)
    return f"{lower[:n]}[{lower[n:]}-{upper[n:]}]"


def parse_interval(cell: str) -> tuple[str, str]:
    """Inverse of :func:`interval_notation`."""
    cell = cell.strip()
    if "[" not in cell:
        return cell, cell
    prefix, rest = cell.split("[", 1)
    if not rest.endswith("]"):
        raise ValueError(f"malformed interval cell {cell!r}")
    inner = rest[:-1]
    sep = inner.find("-", 1)
    if sep < 0:
        raise ValueError(f"malformed interval cell {cell!r}")
    return prefix + inner[:sep], prefix + inner[sep + 1:]


@dataclass(frozen=True)
class IntervalCell:
    lower: str
    upper: str

    @property
    def rendered(self) -> str:
        return interval_notation(self.lower, self.upper)

    @classmethod
    def parse(cls, cell: str) -> IntervalCell:
        return cls(*parse_interval(cell))

    @classmethod
    def from_samples(cls, samples, kind: str, level: float = 0.90, allow_single: bool = False) -> IntervalCell:
        samples = list(samples)
        if len(samples) == 1 and allow_single:
            s = round_metric(samples[0], kind)
            return cls(s, s)
        lo, hi = mean_ci(samples, level)
        return cls(round_metric(lo, kind), round_metric(hi, kind))

    def __str__(self) -> str:
        return self.rendered
