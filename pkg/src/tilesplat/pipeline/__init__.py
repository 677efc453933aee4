"""The per-iteration rendering pipeline, one function per timed stage."""

from __future__ import annotations

from ..scene import Camera, GaussianCloud, ImageBuffer, TileGrid
from .loss import DeviceImage, copy_image_to_device, loss_gradient
from .projection import ProjectedSet, ScreenGradients, project_backward, project_forward
from .raster import RenderAux, rasterize_backward, rasterize_forward
from .tiling import (
    SortedIntersections,
    bin_and_sort,
    compute_index_offsets,
    compute_tile_ranges,
    depth_bits,
    generate_keys,
    sort_intersections,
)

__all__ = [
    "DeviceImage",
    "ProjectedSet",
    "RenderAux",
    "ScreenGradients",
    "SortedIntersections",
    "bin_and_sort",
    "compute_index_offsets",
    "compute_tile_ranges",
    "copy_image_to_device",
    "depth_bits",
    "generate_keys",
    "loss_and_gradients",
    "loss_gradient",
    "project_backward",
    "project_forward",
    "rasterize_backward",
    "rasterize_forward",
    "render",
    "sort_intersections",
]


def render(cloud: GaussianCloud, camera: Camera, tile_size: int = 16, threads: int = 1) -> ImageBuffer:
    grid = TileGrid.for_camera(camera, tile_size)
    proj = project_forward(cloud, camera, grid)
    image, _ = rasterize_forward(proj, bin_and_sort(proj, grid), grid, camera, threads)
    return image


def loss_and_gradients(
    cloud: GaussianCloud,
    camera: Camera,
    target: ImageBuffer,
    lambda_dssim: float = 0.2,
    tile_size: int = 16,
    threads: int = 1,
):
    """Untimed forward + backward: ``(loss, parameter gradients, image)``."""
    grid = TileGrid.for_camera(camera, tile_size)
    proj = project_forward(cloud, camera, grid)
    sorted_ = bin_and_sort(proj, grid)
    image, aux = rasterize_forward(proj, sorted_, grid, camera, threads)
    resident = copy_image_to_device(target, camera, dtype=cloud.dtype)
    loss, dl_dpixel = loss_gradient(image, resident, lambda_dssim)
    screen = rasterize_backward(proj, sorted_, grid, aux, dl_dpixel, threads)
    grads, _ = project_backward(cloud, camera, proj, screen)
    return loss, grads, image
