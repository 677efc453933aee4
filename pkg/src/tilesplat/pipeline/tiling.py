"""Tile binning: index offsets, key generation, sorting and per-tile ranges.

Keys are 64-bit: the tile ID in the high 32 bits, the IEEE-754 bit pattern of
the float32 depth in the low 32 bits.  For positive floats that bit pattern is
monotone in the value, so one integer sort orders entries by tile and then
front-to-back within each tile.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import NegativeDepth, UnsortedInput
from ..scene import TileGrid
from .projection import ProjectedSet


@dataclass(frozen=True)
class SortedIntersections:
    keys: np.ndarray
    gaussian_ids: np.ndarray
    per_tile_range: dict[int, tuple[int, int]]

    def tile_entries(self, tile_id: int) -> np.ndarray:
        start, end = self.per_tile_range.get(tile_id, (0, 0))
        return self.gaussian_ids[start:end]


def compute_index_offsets(tile_counts) -> tuple[np.ndarray, int]:
    """Exclusive prefix sum of tile-touch counts, and the grand total."""
    counts = np.asarray(tile_counts, dtype=np.int64)
    if counts.size == 0:
        return np.zeros(0, dtype=np.int64), 0
    inclusive = np.cumsum(counts)
    offsets = np.empty_like(inclusive)
    offsets[0] = 0
    offsets[1:] = inclusive[:-1]
    return offsets, int(inclusive[-1])


def depth_bits(depths) -> np.ndarray:
    return np.ascontiguousarray(depths, dtype=np.float32).view(np.uint32)


def generate_keys(proj: ProjectedSet, offsets, grid: TileGrid) -> tuple[np.ndarray, np.ndarray]:
    counts = proj.tile_counts
    touching = counts > 0
    if np.any(proj.depths[touching] <= 0):
        raise NegativeDepth("visible Gaussian with non-positive depth")
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, dtype=np.uint64), np.zeros(0, dtype=np.int64)

    ids = np.repeat(np.arange(proj.count, dtype=np.int64), counts)
    local = np.arange(total, dtype=np.int64) - np.asarray(offsets, dtype=np.int64)[ids]
    rects = proj.tile_rects[ids]
    span_x = rects[:, 1] - rects[:, 0]
    ty, tx = np.divmod(local, span_x)
    tile = (rects[:, 2] + ty) * grid.tiles_x + rects[:, 0] + tx

    keys = (tile.astype(np.uint64) << np.uint64(32)) | depth_bits(proj.depths)[ids].astype(np.uint64)
    # entries land at offsets[i] + k because np.repeat preserves Gaussian order
    return keys, ids


def sort_intersections(keys, gaussian_ids) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(keys, kind="stable")
    return keys[order], gaussian_ids[order]


def compute_tile_ranges(sorted_keys, grid: TileGrid | None = None) -> dict[int, tuple[int, int]]:
    keys = np.asarray(sorted_keys, dtype=np.uint64)
    if keys.size == 0:
        return {}
    if np.any(keys[1:] < keys[:-1]):
        raise UnsortedInput("keys must be sorted ascending")
    tiles = (keys >> np.uint64(32)).astype(np.int64)
    if grid is not None and tiles[-1] >= grid.num_tiles:
        raise ValueError(f"tile id {tiles[-1]} outside a grid of {grid.num_tiles} tiles")
    starts = np.flatnonzero(np.r_[True, tiles[1:] != tiles[:-1]])
    ends = np.r_[starts[1:], len(tiles)]
    return {int(tiles[s]): (int(s), int(e)) for s, e in zip(starts, ends)}


def bin_and_sort(proj: ProjectedSet, grid: TileGrid) -> SortedIntersections:
    """All four tiling stages in sequence (untimed convenience)."""
    offsets, _ = compute_index_offsets(proj.tile_counts)
    keys, ids = generate_keys(proj, offsets, grid)
    keys, ids = sort_intersections(keys, ids)
    return SortedIntersections(keys, ids, compute_tile_ranges(keys, grid))
