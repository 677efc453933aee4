"""The instrumented training loop shared by the ``train`` and ``bench`` commands."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .errors import NumericalFailure
from .instrument import StageBreakdown, StageClock, StageId
from .membench import GIB, Arena, BufferSet
from .optim import AdamState, DensifyStats, adam_step, densify_default, densify_mcmc
from .pipeline import (
    compute_index_offsets,
    compute_tile_ranges,
    copy_image_to_device,
    generate_keys,
    loss_gradient,
    project_backward,
    project_forward,
    rasterize_backward,
    rasterize_forward,
    render,
    sort_intersections,
)
from .pipeline.tiling import SortedIntersections
from .scene import FLOATS_PER_GAUSSIAN, GaussianCloud, TileGrid, logit
from .sceneio import SceneBundle, generate_synthetic, load_scene
from .stats.metrics import psnr, ssim

log = logging.getLogger(__name__)

F32 = 4
# per-Gaussian device buffers, bytes per Gaussian
GAUSSIAN_BUFFERS = {
    "gaussians.params": FLOATS_PER_GAUSSIAN * F32,
    "gaussians.grads": FLOATS_PER_GAUSSIAN * F32,
    "adam.moments": 2 * FLOATS_PER_GAUSSIAN * F32,
    "projected": 16 * F32,
    "densify.stats": 2 * F32,
}
# per-intersection buffers (keys and values, double-buffered for the sort)
INTERSECTION_BUFFERS = {
    "intersections.keys": 2 * 8,
    "intersections.values": 2 * 4,
}


@dataclass
class TrainResult:
    scene: str
    cloud: GaussianCloud
    breakdown: StageBreakdown
    arena: Arena
    metrics: dict[str, float]
    initial_psnr: float
    count_history: list[int] = field(default_factory=list)
    loss_history: list[float] = field(default_factory=list)
    stage_calls: dict[StageId, int] = field(default_factory=dict)
    resize_events: int = 0


def load_bundle(cfg: RunConfig, run_seed: int | None = None) -> SceneBundle:
    if cfg.scene == "synthetic":
        s = cfg.synthetic
        return generate_synthetic(
            s.seed, s.n_gaussians, s.n_cameras, s.width, s.height,
            position_noise=s.position_noise, color_noise=s.color_noise,
            tile_size=cfg.tile_size, init_seed=run_seed,
        )
    return load_scene(cfg.scene, cfg.downscale, n_init=cfg.n_init, seed=cfg.seed if run_seed is None else run_seed)


def fit_to_budget(cloud: GaussianCloud, budget: int, rng: np.random.Generator) -> GaussianCloud:
    """Pad with transparent copies (relocated at the first MCMC event) or subsample."""
    if cloud.count == budget:
        return cloud
    if cloud.count > budget:
        return cloud.take(np.sort(rng.choice(cloud.count, budget, replace=False)))
    extra = cloud.take(rng.integers(0, cloud.count, budget - cloud.count))
    extra = extra.with_arrays(opacity_logits=np.full(extra.count, logit(0.001), dtype=cloud.dtype))
    return GaussianCloud.concat([cloud, extra])


def evaluate(cloud: GaussianCloud, bundle: SceneBundle, tile_size: int, threads: int = 1) -> tuple[float, float]:
    """Mean PSNR and SSIM over the training views."""
    p, s = [], []
    for cam, target in zip(bundle.cameras, bundle.images):
        img = render(cloud, cam, tile_size, threads)
        p.append(psnr(img, target))
        s.append(ssim(img, target) if min(cam.width, cam.height) >= 11 else float("nan"))
    return float(np.mean(p)), float(np.mean(s))


def train(cfg: RunConfig, bundle: SceneBundle | None = None, run_seed: int | None = None, clock=time.perf_counter) -> TrainResult:
    cfg.validate()
    seed = cfg.seed if run_seed is None else run_seed
    if bundle is None:
        bundle = load_bundle(cfg, seed)
    rng = np.random.default_rng(seed)
    cloud = bundle.initial.astype(np.float32)
    mcmc = cfg.densify == "mcmc"
    if mcmc:
        cloud = fit_to_budget(cloud, cfg.budget, rng)
    initial_psnr, _ = evaluate(cloud, bundle, cfg.tile_size, cfg.threads)

    grids = [TileGrid.for_camera(c, cfg.tile_size) for c in bundle.cameras]
    max_pixels = max(g.width * g.height for g in grids)
    max_tiles = max(g.num_tiles for g in grids)

    stages = StageClock(clock)
    t0 = clock()
    reserve = None
    budget_bytes = None
    if cfg.preallocate:
        reserve = cfg.budget if mcmc else cfg.max_gaussians
        budget_bytes = (
            sum(GAUSSIAN_BUFFERS.values()) * reserve
            + sum(INTERSECTION_BUFFERS.values()) * reserve * max_tiles
            + max_pixels * (3 * F32 * 3 + 2 * 8)
        )
    arena = Arena(
        "preallocate" if cfg.preallocate else "grow",
        growth_factor=cfg.membench.growth_factor,
        budget_bytes=budget_bytes,
        clock=lambda: clock() - t0,
    )
    gauss_bufs = BufferSet(arena, GAUSSIAN_BUFFERS, cloud.count, reserve)
    isect_bufs = BufferSet(arena, INTERSECTION_BUFFERS, 0, None if reserve is None else reserve * max_tiles)
    for name, nbytes in (
        ("image.render", max_pixels * 3 * F32),
        ("image.target", max_pixels * 3 * F32),
        ("image.dl_dpixel", max_pixels * 3 * F32),
        ("render.aux", max_pixels * (F32 + 8)),
    ):
        arena.alloc(name, nbytes)

    state = AdamState.for_cloud(cloud, cfg.optimizer.for_step(0, bundle.extent))
    stats = DensifyStats.zeros(cloud.count)
    result = TrainResult(bundle.name, cloud, None, arena, {}, initial_psnr)
    n_views = len(bundle.cameras)

    for it in range(cfg.iterations):
        iteration = it + 1
        view = it % n_views
        cam, grid, target = bundle.cameras[view], grids[view], bundle.images[view]

        with stages.stage(StageId.ProjectionForward):
            proj = project_forward(cloud, cam, grid)
        with stages.stage(StageId.IndexOffset):
            offsets, total = compute_index_offsets(proj.tile_counts)
        with stages.stage(StageId.GenerateKeys):
            isect_bufs.fit(total)
            keys, ids = generate_keys(proj, offsets, grid)
        with stages.stage(StageId.Sorting):
            keys, ids = sort_intersections(keys, ids)
        with stages.stage(StageId.TileRanges):
            sorted_ = SortedIntersections(keys, ids, compute_tile_ranges(keys, grid))
        with stages.stage(StageId.RasterizationForward):
            image, aux = rasterize_forward(proj, sorted_, grid, cam, cfg.threads)
        with stages.stage(StageId.CopyImageToDevice):
            resident = copy_image_to_device(target, cam, dtype=cloud.dtype)
        with stages.stage(StageId.LossGradient):
            loss, dl_dpixel = loss_gradient(image, resident, cfg.lambda_dssim)
        if not math.isfinite(loss):
            raise NumericalFailure(f"non-finite loss at iteration {iteration}")
        with stages.stage(StageId.RasterizationBackward):
            screen = rasterize_backward(proj, sorted_, grid, aux, dl_dpixel, cfg.threads)
        with stages.stage(StageId.ProjBwdOptimizer):
            grads, screen_norms = project_backward(cloud, cam, proj, screen)
            stats.accumulate(screen_norms, proj.visible)
            state.lrs = cfg.optimizer.for_step(it, bundle.extent)
            cloud, state = adam_step(cloud, grads, state)
        with stages.stage(StageId.Densification):
            if mcmc:
                cloud, state, _ = densify_mcmc(
                    cloud, state, iteration, cfg.mcmc,
                    iterations=cfg.iterations, position_lr=state.lrs["positions"], rng=rng,
                )
            else:
                cloud, state, stats, report = densify_default(
                    cloud, state, stats, iteration, cfg.densify_default,
                    iterations=cfg.iterations, extent=bundle.extent, rng=rng, buffers=gauss_bufs,
                )
                result.resize_events += len(report.resize_events)
        result.count_history.append(cloud.count)
        result.loss_history.append(loss)

    elapsed = clock() - t0
    result.breakdown = stages.finalize(elapsed)
    result.stage_calls = dict(stages.calls)
    result.resize_events = sum(1 for e in arena.trace if e.event == "resize")
    result.cloud = cloud

    final_psnr, final_ssim = evaluate(cloud, bundle, cfg.tile_size, cfg.threads)
    result.metrics = {
        "psnr": final_psnr,
        "ssim": final_ssim,
        "time_seconds": elapsed,
        "total_vram_gib": arena.max_total() / GIB,
        "peak_vram_gib": arena.peak_bytes / GIB,
        "num_gs_thousands": cloud.count / 1000,
    }
    log.info(
        "%s: %d iterations, PSNR %.2f -> %.2f dB, %d Gaussians, %.2fs",
        bundle.name, cfg.iterations, initial_psnr, final_psnr, cloud.count, elapsed,
    )
    return result
