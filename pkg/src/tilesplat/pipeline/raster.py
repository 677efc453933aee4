"""Front-to-back alpha compositing over sorted tile ranges, and its adjoint.

Each tile is processed as a dense (pixels x entries) block.  The block form is
equivalent to the per-pixel loop

    for entry in tile range (front to back):
        sigma = 0.5 * (a dx^2 + c dy^2) + b dx dy
        if sigma < 0: continue
        alpha = min(0.99, opacity * exp(-sigma))
        if alpha < 1/255: continue
        C += color * alpha * T
        T *= 1 - alpha
        if T < 1e-4: break

because T only changes on composited entries, so "entry k is composited" is
exactly "entry k passes the skips and the transmittance before it is still
>= 1e-4".
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ..errors import StaleAux
from ..scene import Camera, ImageBuffer, TileGrid
from .projection import ProjectedSet, ScreenGradients
from .tiling import SortedIntersections

ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_STOP = 1e-4


@dataclass(frozen=True)
class RenderAux:
    """Per-pixel state saved by the forward pass.

    ``last_contributor`` counts the entries of the pixel's tile range up to and
    including the last one that was composited (0 when nothing was).
    """

    final_transmittance: np.ndarray
    last_contributor: np.ndarray


@dataclass
class _Block:
    ids: np.ndarray
    dx: np.ndarray
    dy: np.ndarray
    gauss: np.ndarray
    raw: np.ndarray
    alpha: np.ndarray
    t_before: np.ndarray
    included: np.ndarray
    weights: np.ndarray


def _pixel_centers(grid: TileGrid, tile_id: int, dtype):
    x0, x1, y0, y1 = grid.tile_bounds(tile_id)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    return (x0, x1, y0, y1), xs.ravel().astype(dtype) + 0.5, ys.ravel().astype(dtype) + 0.5


def _evaluate_block(proj: ProjectedSet, ids, px, py, limit=None) -> _Block:
    mean = proj.means2d[ids]
    a, b, c = proj.conics[ids, 0], proj.conics[ids, 1], proj.conics[ids, 2]
    dx = px[:, None] - mean[None, :, 0]
    dy = py[:, None] - mean[None, :, 1]
    sigma = 0.5 * (a * dx * dx + c * dy * dy) + b * dx * dy
    gauss = np.exp(-sigma)
    raw = proj.opacities[ids] * gauss
    alpha = np.minimum(ALPHA_MAX, raw)
    valid = (sigma >= 0) & (alpha >= ALPHA_MIN)
    alpha = np.where(valid, alpha, 0)

    survive = np.cumprod(1 - alpha, axis=1)
    t_before = np.ones_like(survive)
    t_before[:, 1:] = survive[:, :-1]
    included = valid & (t_before >= T_STOP)
    if limit is not None:
        included &= np.arange(len(ids))[None, :] < limit[:, None]
    weights = np.where(included, alpha * t_before, 0)
    return _Block(ids, dx, dy, gauss, raw, alpha, t_before, included, weights)


def _tile_list(grid: TileGrid, sorted_: SortedIntersections) -> list[int]:
    return [t for t, (s, e) in sorted(sorted_.per_tile_range.items()) if e > s and t < grid.num_tiles]


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def rasterize_forward(
    proj: ProjectedSet,
    sorted_: SortedIntersections,
    grid: TileGrid,
    camera: Camera | None = None,
    threads: int = 1,
) -> tuple[ImageBuffer, RenderAux]:
    dtype = proj.means2d.dtype
    image = np.zeros((grid.height, grid.width, 3), dtype=dtype)
    final_t = np.ones((grid.height, grid.width), dtype=dtype)
    last = np.zeros((grid.height, grid.width), dtype=np.int64)

    def tile_job(tile_id):
        (x0, x1, y0, y1), px, py = _pixel_centers(grid, tile_id, dtype)
        blk = _evaluate_block(proj, sorted_.tile_entries(tile_id), px, py)
        shape = (y1 - y0, x1 - x0)
        color = (blk.weights @ proj.colors[blk.ids]).reshape(*shape, 3)
        t_final = np.prod(np.where(blk.included, 1 - blk.alpha, 1), axis=1).reshape(shape)
        k = blk.included.shape[1]
        lastk = np.where(blk.included.any(axis=1), k - np.argmax(blk.included[:, ::-1], axis=1), 0)
        image[y0:y1, x0:x1] = color
        final_t[y0:y1, x0:x1] = t_final
        last[y0:y1, x0:x1] = lastk.reshape(shape)

    _map(tile_job, _tile_list(grid, sorted_), threads)
    return ImageBuffer(image), RenderAux(final_t, last)


def rasterize_backward(
    proj: ProjectedSet,
    sorted_: SortedIntersections,
    grid: TileGrid,
    aux: RenderAux,
    dl_dpixel: np.ndarray,
    threads: int = 1,
) -> ScreenGradients:
    if aux.final_transmittance.shape != (grid.height, grid.width) or dl_dpixel.shape[:2] != (grid.height, grid.width):
        raise StaleAux("saved render state does not match the tile grid")
    dtype = proj.means2d.dtype
    out = ScreenGradients.zeros(proj.count, dtype)

    def tile_job(tile_id):
        (x0, x1, y0, y1), px, py = _pixel_centers(grid, tile_id, dtype)
        limit = aux.last_contributor[y0:y1, x0:x1].ravel()
        blk = _evaluate_block(proj, sorted_.tile_entries(tile_id), px, py, limit)
        g = dl_dpixel[y0:y1, x0:x1].reshape(-1, 3).astype(dtype)
        colors = proj.colors[blk.ids]

        g_colors = blk.weights.T @ g
        cg = g @ colors.T
        # back-to-front: everything composited behind entry k
        wc = blk.weights * cg
        behind = np.cumsum(wc[:, ::-1], axis=1)[:, ::-1] - wc
        g_alpha = cg * blk.t_before - behind / (1 - blk.alpha)
        active = blk.included & (blk.raw < ALPHA_MAX)
        g_alpha = np.where(active, g_alpha, 0)

        opac = proj.opacities[blk.ids]
        g_opac = np.sum(g_alpha * blk.gauss, axis=0)
        g_sigma = -g_alpha * opac * blk.gauss
        a, b, c = (proj.conics[blk.ids, i] for i in range(3))
        dx, dy = blk.dx, blk.dy
        g_mx = np.sum(g_sigma * -(a * dx + b * dy), axis=0)
        g_my = np.sum(g_sigma * -(c * dy + b * dx), axis=0)
        g_conic = np.stack(
            [
                np.sum(g_sigma * 0.5 * dx * dx, axis=0),
                np.sum(g_sigma * dx * dy, axis=0),
                np.sum(g_sigma * 0.5 * dy * dy, axis=0),
            ],
            axis=1,
        )
        return blk.ids, np.stack([g_mx, g_my], axis=1), g_conic, g_colors, g_opac

    # fixed tile-major reduction order keeps results independent of thread count
    for ids, g_mean, g_conic, g_colors, g_opac in _map(tile_job, _tile_list(grid, sorted_), threads):
        out.means2d[ids] += g_mean
        out.conics[ids] += g_conic
        out.colors[ids] += g_colors
        out.opacities[ids] += g_opac
    return out
