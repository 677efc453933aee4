"""Buffer-arena accounting with resize spikes, and a sampled-polling simulator.

``total`` is the sum of the capacities of all live buffers.  ``peak`` is the
largest instantaneous footprint seen so far, which includes the moment during
a growing resize when the old and new allocations coexist while data is
copied across.
"""

from __future__ import annotations

import csv
import math
from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .errors import BudgetExceeded, DoubleFree, StaleHandle, ZeroTotal

GIB = 1024**3


@dataclass(frozen=True)
class TraceEvent:
    t_seconds: float
    event: str  # "alloc" | "resize" | "free"
    name: str
    old_capacity: int
    new_capacity: int
    total: int
    peak: int

    @property
    def spike(self) -> int:
        """Footprint while a growing resize copies data (old and new both live)."""
        if self.event == "resize" and self.new_capacity > self.old_capacity:
            return self.total + self.old_capacity
        return self.total


@dataclass
class _Buffer:
    name: str
    size: int
    capacity: int


class Arena:
    """Tracks live buffers and their accounting.

    ``policy="grow"`` enlarges a buffer by ``growth_factor`` when a resize
    exceeds its capacity.  ``policy="preallocate"`` sizes buffers once, up to
    ``budget_bytes`` in total; any later growth raises :class:`BudgetExceeded`.
    """

    def __init__(
        self,
        policy: str = "grow",
        growth_factor: float = 1.5,
        budget_bytes: int | None = None,
        clock: Callable[[], float] | None = None,
    ):
        if policy not in ("grow", "preallocate"):
            raise ValueError(f"unknown arena policy {policy!r}")
        if policy == "preallocate" and budget_bytes is None:
            raise ValueError("preallocate policy needs budget_bytes")
        self.policy = policy
        self.growth_factor = growth_factor
        self.budget_bytes = budget_bytes
        self.clock = clock or (lambda: 0.0)
        self.total_bytes = 0
        self.peak_bytes = 0
        self._live: dict[int, _Buffer] = {}
        self._freed: set[int] = set()
        self._next = 0
        self._trace: list[TraceEvent] = []

    @property
    def live(self) -> dict[int, tuple[str, int, int]]:
        return {h: (b.name, b.size, b.capacity) for h, b in self._live.items()}

    @property
    def trace(self) -> tuple[TraceEvent, ...]:
        return tuple(self._trace)

    def _record(self, event, name, old, new, candidate):
        self.peak_bytes = max(self.peak_bytes, candidate, self.total_bytes)
        self._trace.append(
            TraceEvent(float(self.clock()), event, name, old, new, self.total_bytes, self.peak_bytes)
        )

    def _get(self, handle: int) -> _Buffer:
        if handle in self._freed:
            raise DoubleFree(f"buffer handle {handle} was already freed")
        try:
            return self._live[handle]
        except KeyError:
            raise StaleHandle(f"unknown buffer handle {handle}") from None

    def alloc(self, name: str, size: int, reserve: int | None = None) -> int:
        if size < 0:
            raise ValueError("buffer size must be non-negative")
        capacity = max(size, reserve or 0)
        if self.policy == "preallocate" and self.total_bytes + capacity > self.budget_bytes:
            raise BudgetExceeded(
                f"{name}: {capacity} bytes requested, {self.budget_bytes - self.total_bytes} remaining"
            )
        handle = self._next
        self._next += 1
        self._live[handle] = _Buffer(name, size, capacity)
        self.total_bytes += capacity
        self._record("alloc", name, 0, capacity, self.total_bytes)
        return handle

    def resize(self, handle: int, new_size: int) -> None:
        buf = self._get(handle)
        if new_size <= buf.capacity:
            buf.size = new_size
            return
        if self.policy == "preallocate":
            raise BudgetExceeded(f"{buf.name}: resize to {new_size} exceeds preallocated {buf.capacity}")
        old = buf.capacity
        new = max(new_size, math.ceil(old * self.growth_factor))
        spike = self.total_bytes + new
        self.total_bytes += new - old
        buf.size, buf.capacity = new_size, new
        self._record("resize", buf.name, old, new, spike)

    def free(self, handle: int) -> None:
        buf = self._get(handle)
        del self._live[handle]
        self._freed.add(handle)
        self.total_bytes -= buf.capacity
        self._record("free", buf.name, buf.capacity, 0, self.total_bytes)

    def max_total(self) -> int:
        return max((e.total for e in self._trace), default=0)


class BufferSet:
    """A group of buffers whose sizes scale with one item count.

    ``bytes_per_item`` maps buffer name to bytes per item.  ``reserve_items``
    preallocates every buffer for that many items.
    """

    def __init__(self, arena: Arena, bytes_per_item: dict[str, int], items: int, reserve_items: int | None = None):
        self.arena = arena
        self.bytes_per_item = dict(bytes_per_item)
        self.handles = {
            name: arena.alloc(name, per * items, None if reserve_items is None else per * reserve_items)
            for name, per in self.bytes_per_item.items()
        }

    def fit(self, items: int) -> list[TraceEvent]:
        before = len(self.arena.trace)
        for name, per in self.bytes_per_item.items():
            self.arena.resize(self.handles[name], per * items)
        return list(self.arena.trace[before:])

    def free(self) -> None:
        for handle in self.handles.values():
            self.arena.free(handle)


def _segments(trace: Sequence[TraceEvent], copy_window: float):
    """Footprint step function as ``(start_time, value)`` in program order.

    A growing resize shows its spike for ``copy_window`` seconds or until the
    next event, whichever comes first.
    """
    segs = [(0.0, 0)]
    for i, ev in enumerate(trace):
        if ev.spike != ev.total:
            segs.append((ev.t_seconds, ev.spike))
            end = ev.t_seconds + copy_window
            if i + 1 < len(trace):
                end = min(end, trace[i + 1].t_seconds)
            segs.append((end, ev.total))
        else:
            segs.append((ev.t_seconds, ev.total))
    return segs


def poll_simulate(
    trace: Sequence[TraceEvent],
    rate_hz: float,
    copy_window: float = 1e-3,
    end_time: float | None = None,
) -> int:
    """Largest footprint seen by sampling at ``t = 0, 1/rate, 2/rate, ...``.

    ``rate_hz=math.inf`` samples every state boundary and returns the true peak.
    """
    trace = list(trace)
    if any(b.t_seconds < a.t_seconds for a, b in zip(trace, trace[1:])):
        raise ValueError("trace timestamps must be non-decreasing")
    segs = _segments(trace, copy_window)
    if math.isinf(rate_hz):
        return max(v for _, v in segs)
    if end_time is None:
        end_time = max((s for s, _ in segs), default=0.0)
    starts = [s for s, _ in segs]
    observed = 0
    n_samples = int(math.floor(end_time * rate_hz + 1e-9)) + 1
    j = 0
    for i in range(n_samples):
        t = i / rate_hz
        # last segment starting at or before t; ties go to the later segment
        while j + 1 < len(segs) and starts[j + 1] <= t:
            j += 1
        observed = max(observed, segs[j][1])
    return observed


def overhead_percent(peak: float, total: float) -> int:
    """``(peak / total - 1) * 100`` rounded half away from zero."""
    if total <= 0:
        raise ZeroTotal("total must be positive")
    pct = (peak / total - 1.0) * 100.0
    return int(math.copysign(math.floor(abs(pct) + 0.5), pct))


TRACE_COLUMNS = [f.name for f in fields(TraceEvent)]


def write_trace_csv(trace: Iterable[TraceEvent], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for ev in trace:
            row = astuple(ev)
            writer.writerow([f"{row[0]:.6f}", *row[1:]])


def read_trace_csv(path) -> list[TraceEvent]:
    with open(Path(path), newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        TraceEvent(
            float(r["t_seconds"]), r["event"], r["name"],
            int(r["old_capacity"]), int(r["new_capacity"]), int(r["total"]), int(r["peak"]),
        )
        for r in rows
    ]
