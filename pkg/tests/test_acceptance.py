"""Acceptance criteria 1-11.  A PASS/FAIL line per criterion is printed in the
terminal summary (see conftest.py)."""

from __future__ import annotations

import csv
import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats as scistats

from oracles import fd_scene, naive_composite, naive_offsets, naive_tiling, random_cloud, regime_signature, replay_arena
from tilesplat.cli import METRICS, cmd_bench
from tilesplat.config import RunConfig
from tilesplat.instrument import UNACCOUNTED, StageBreakdown, group_rows
from tilesplat.membench import GIB, Arena, overhead_percent, poll_simulate
from tilesplat.pipeline import (
    bin_and_sort,
    compute_index_offsets,
    compute_tile_ranges,
    depth_bits,
    generate_keys,
    loss_and_gradients,
    project_forward,
    rasterize_forward,
    sort_intersections,
)
from tilesplat.scene import Camera, GaussianCloud, ImageBuffer, TileGrid
from tilesplat.stats.intervals import DECIMALS, interval_notation, mean_ci, parse_interval, round_metric
from tilesplat.stats.metrics import psnr, ssim
from tilesplat.train import train

DATA = Path(__file__).parent / "data"
BREAKDOWN_TABLES = [
    "breakdown_rtx3090_default",
    "breakdown_rtx3090_mcmc",
    "breakdown_rx7800xt_default",
    "breakdown_rx7800xt_mcmc",
]


def criterion(number, title):
    return pytest.mark.criterion(number, title)


def read_wide(name):
    with open(DATA / f"{name}.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0][1:]
    return header, {r[0]: r[1:] for r in rows[1:]}


# --- 1 -----------------------------------------------------------------------

FD_STEP = 1e-4


def _perturbed(base, name, idx, delta):
    arrays = {k: v.copy() for k, v in base.items()}
    arrays[name][idx] += delta
    return GaussianCloud(**arrays)


@criterion(1, "end-to-end gradients match central finite differences")
def test_gradient_oracle():
    start = time.perf_counter()
    checked = excluded = 0
    failures = []
    for seed in range(20):
        cloud, cam, target = fd_scene(seed, n=8)
        assert cloud.dtype == np.float64
        _, grads, _ = loss_and_gradients(cloud, cam, target, lambda_dssim=0.2)
        base = cloud.arrays()
        reference = regime_signature(cloud, cam)
        for name, arr in base.items():
            analytic = grads.arrays()[name]
            for idx in np.ndindex(arr.shape):
                # skip parameters whose +-10h neighbourhood crosses a clamp or skip branch
                near = [regime_signature(_perturbed(base, name, idx, s * 10 * FD_STEP), cam) for s in (1, -1)]
                if any(sig != reference for sig in near):
                    excluded += 1
                    continue
                lp = loss_and_gradients(_perturbed(base, name, idx, FD_STEP), cam, target, 0.2)[0]
                lm = loss_and_gradients(_perturbed(base, name, idx, -FD_STEP), cam, target, 0.2)[0]
                fd = (lp - lm) / (2 * FD_STEP)
                err = abs(fd - analytic[idx])
                scale = max(abs(fd), abs(analytic[idx]))
                checked += 1
                if err > 1e-6 and err > 1e-3 * scale:
                    failures.append((seed, name, idx, fd, analytic[idx]))
    elapsed = time.perf_counter() - start
    print(f"checked {checked} parameters, excluded {excluded} near branch boundaries, {elapsed:.1f}s")
    assert not failures, failures[:10]
    assert checked > 10 * excluded
    assert elapsed < 60


# --- 2 -----------------------------------------------------------------------


@criterion(2, "tiling pipeline equals the naive per-tile sort oracle")
def test_tiling_oracle():
    start = time.perf_counter()
    cam = Camera(fx=60.0, fy=60.0, cx=40.0, cy=28.0, width=80, height=56)
    grid = TileGrid.for_camera(cam, 16)
    sizes = np.unique(np.r_[1, 10_000, np.round(10 ** np.linspace(0, 4, 98)).astype(int)])
    rng = np.random.default_rng(2)
    clouds = 0
    for n in np.resize(sizes, 100):
        cloud = random_cloud(rng, int(n), depth=(-0.5, 6.0), spread=2.0, scale=(0.01, 0.4), dtype=np.float32)
        proj = project_forward(cloud, cam, grid)

        offsets, total = compute_index_offsets(proj.tile_counts)
        want_offsets, want_total = naive_offsets(proj.tile_counts)
        assert offsets.tolist() == want_offsets and total == want_total

        keys, ids = sort_intersections(*generate_keys(proj, offsets, grid))
        per_tile = naive_tiling(proj, grid)
        want_ids = [i for t in sorted(per_tile) for i in per_tile[t]]
        bits = depth_bits(proj.depths).astype(int)
        want_keys = [(t << 32) | int(bits[i]) for t in sorted(per_tile) for i in per_tile[t]]
        assert ids.tolist() == want_ids
        assert keys.tolist() == want_keys

        ranges = compute_tile_ranges(keys, grid)
        pos, want_ranges = 0, {}
        for t in sorted(per_tile):
            want_ranges[t] = (pos, pos + len(per_tile[t]))
            pos += len(per_tile[t])
        assert ranges == want_ranges
        clouds += 1
    elapsed = time.perf_counter() - start
    print(f"{clouds} clouds, sizes 1..{sizes.max()}, {elapsed:.1f}s")
    assert clouds == 100 and elapsed < 30


# --- 3 -----------------------------------------------------------------------


@criterion(3, "per-pixel compositing weights plus final transmittance sum to one")
def test_compositing_conservation():
    rng = np.random.default_rng(3)
    worst = 0.0
    for k in range(50):
        size = int(rng.choice([16, 24, 32]))
        cloud = random_cloud(rng, int(rng.integers(1, 40)), scale=(0.05, 0.6), dtype=np.float64)
        cloud = cloud.with_arrays(opacity_logits=rng.normal(1.0, 2.0, cloud.count))
        cam = Camera(fx=1.2 * size, fy=1.2 * size, cx=size / 2, cy=size / 2, width=size, height=size)
        grid = TileGrid.for_camera(cam, 16)
        proj = project_forward(cloud, cam, grid)
        sorted_ = bin_and_sort(proj, grid)
        image, aux = rasterize_forward(proj, sorted_, grid, cam)
        ref_image, ref_t, weights = naive_composite(proj, sorted_, grid)
        np.testing.assert_allclose(aux.final_transmittance, ref_t, rtol=0, atol=1e-12)
        np.testing.assert_allclose(image.pixels, ref_image, rtol=0, atol=1e-12)
        worst = max(worst, float(np.max(np.abs(weights + aux.final_transmittance - 1))))
    print(f"max |sum(alpha*T) + T_final - 1| = {worst:.2e}")
    assert worst <= 1e-6


# --- 4 -----------------------------------------------------------------------


@pytest.fixture(scope="module")
def fit_run():
    cfg = RunConfig(iterations=500, lambda_dssim=0.0)
    start = time.perf_counter()
    result = train(cfg)
    return result, time.perf_counter() - start


@criterion(4, "synthetic 500-iteration fit reaches 25 dB and gains 10 dB")
def test_end_to_end_fit(fit_run):
    result, elapsed = fit_run
    gain = result.metrics["psnr"] - result.initial_psnr
    print(f"PSNR {result.initial_psnr:.2f} -> {result.metrics['psnr']:.2f} dB (+{gain:.2f}) in {elapsed:.1f}s")
    assert result.metrics["psnr"] >= 25.0
    assert gain >= 10.0
    assert elapsed < 120


# --- 5 -----------------------------------------------------------------------


@criterion(5, "MCMC keeps count at budget; preallocated arena has peak == max total")
def test_mcmc_budget_invariant():
    cfg = RunConfig(iterations=300, densify="mcmc", budget=512, preallocate=True)
    result = train(cfg)
    assert len(result.count_history) == 300
    assert set(result.count_history) == {512}
    assert result.cloud.count == 512
    trace = result.arena.trace
    assert not any(e.event == "resize" for e in trace)
    assert result.arena.peak_bytes == result.arena.max_total() == max(e.total for e in trace)
    print(f"count 512 at all 300 iterations, peak == total == {result.arena.peak_bytes} bytes")


# --- 6 -----------------------------------------------------------------------


def growth_config() -> RunConfig:
    cfg = RunConfig(iterations=300)
    cfg.densify_default.start = 50
    cfg.densify_default.interval = 50
    cfg.densify_default.stop = 250
    return cfg


def spike_trace():
    """Steady 5.72 GiB, one resize at t=0.5 s whose copy lasts 0.05 s and peaks at 6.75 GiB."""
    unit = GIB // 100
    now = [0.0]
    arena = Arena(clock=lambda: now[0], growth_factor=1.0)
    arena.alloc("model", 469 * unit)
    keys = arena.alloc("keys", 50 * unit)
    scratch = arena.alloc("scratch", 53 * unit)
    now[0] = 0.5
    arena.resize(keys, 103 * unit)
    now[0] = 0.55
    arena.free(scratch)
    return arena, unit


@criterion(6, "resize spikes: replayed trace, peak > total, 1 Hz polling misses the spike")
def test_resize_spike_semantics():
    result = train(growth_config())
    trace = result.arena.trace
    resizes = [e for e in trace if e.event == "resize"]
    assert len(resizes) >= 1
    replay = replay_arena(trace)
    for ev, (total, peak, live_sum) in zip(trace, replay):
        assert (ev.total, ev.peak) == (total, peak)
        assert total == live_sum
    assert result.arena.peak_bytes == max(e.spike for e in trace)
    assert result.arena.peak_bytes > result.arena.total_bytes
    print(
        f"{len(resizes)} resizes, final total {result.arena.total_bytes}, peak {result.arena.peak_bytes}, "
        f"count {result.count_history[0]} -> {result.cloud.count}"
    )

    arena, unit = spike_trace()
    assert arena.peak_bytes == 675 * unit
    assert poll_simulate(arena.trace, 1.0, copy_window=0.05, end_time=1.0) == 572 * unit
    assert poll_simulate(arena.trace, math.inf, copy_window=0.05) == arena.peak_bytes


# --- 7 -----------------------------------------------------------------------


# Columns whose printed rows do not reconcile to 0.1 s: every cell is rounded to
# 0.1 s on its own, so 13 rounded cells can drift by up to 0.65 s in total.
PUBLISHED_ROUNDING = {
    ("breakdown_rtx3090_default", "kitchen"),
    ("breakdown_rtx3090_mcmc", "bonsai"),
    ("breakdown_rtx3090_mcmc", "kitchen"),
    ("breakdown_rx7800xt_default", "counter"),
    ("breakdown_rx7800xt_mcmc", "bonsai"),
}


def _columns():
    for table in BREAKDOWN_TABLES:
        header, _ = read_wide(table)
        for scene in header:
            marks = []
            if (table, scene) in PUBLISHED_ROUNDING:
                marks.append(pytest.mark.xfail(strict=True, reason="printed cells are rounded independently"))
            yield pytest.param(table, scene, marks=marks, id=f"{table}-{scene}")


@criterion(7, "overhead, Unaccounted and grouped rows reproduce the published arithmetic")
def test_published_arithmetic():
    assert overhead_percent(6.75, 5.72) == 18
    assert overhead_percent(11.98, 8.68) == 38
    _, rows = read_wide("breakdown_rtx3090_default")
    bicycle = StageBreakdown.from_rows({label: float(v[0]) for label, v in rows.items()})
    assert round(bicycle.stage_sum, 1) == 525.4
    assert round(bicycle.unaccounted_seconds, 1) == 49.5
    grouped = dict(group_rows(bicycle))
    assert round(grouped["Tiling/Sorting"], 1) == 29.2
    assert round(grouped["Loss"], 1) == 23.7


@criterion(7, "overhead, Unaccounted and grouped rows reproduce the published arithmetic")
@pytest.mark.parametrize("table, scene", list(_columns()))
def test_unaccounted_recomputed(table, scene):
    header, rows = read_wide(table)
    col = header.index(scene)
    b = StageBreakdown.from_rows({label: float(v[col]) for label, v in rows.items()})
    assert abs(b.unaccounted_seconds - float(rows[UNACCOUNTED][col])) <= 0.1 + 1e-9


# --- 8 -----------------------------------------------------------------------


@criterion(8, "interval notation reproduces published cells; parse inverts render")
def test_interval_notation():
    cases = {
        ("25.48", "25.54"): "25.[48-54]",
        ("29.20", "29.27"): "29.2[0-7]",
        ("0.916", "0.916"): "0.916",
        ("576", "583"): "5[76-83]",
        ("4999", "5028"): "[4999-5028]",
        ("5821", "5852"): "58[21-52]",
        ("1000", "1000"): "1000",
    }
    for bounds, cell in cases.items():
        assert interval_notation(*bounds) == cell
        assert parse_interval(cell) == bounds

    rng = np.random.default_rng(8)
    kinds = list(DECIMALS)
    for _ in range(10_000):
        kind = kinds[rng.integers(len(kinds))]
        scale = 10.0 ** rng.integers(-1, 5)
        a, b = np.sort(rng.normal(0, scale, 2) if rng.random() < 0.2 else rng.uniform(0, scale, 2))
        lo, hi = round_metric(a, kind), round_metric(b, kind)
        assert parse_interval(interval_notation(lo, hi)) == (lo, hi)


# --- 9 -----------------------------------------------------------------------


@criterion(9, "90% Student-t interval of the mean")
def test_statistics():
    assert round(float(scistats.t.ppf(0.95, 4)), 4) == 2.1318
    lo, hi = mean_ci([10, 11, 12, 13, 14], 0.90)
    assert (round_metric(lo, "psnr"), round_metric(hi, "psnr")) == ("10.49", "13.51")
    for c in (0.0, 3.25, 29.2):
        assert mean_ci([c] * 5) == (c, c)


# --- 10 ----------------------------------------------------------------------


@criterion(10, "SSIM and PSNR values, SSIM against an independent implementation")
def test_metrics():
    from skimage.metrics import structural_similarity

    rng = np.random.default_rng(10)
    a = ImageBuffer(rng.uniform(0, 1, (32, 40, 3)))
    assert ssim(a, a) == 1.0
    base = rng.uniform(0.2, 0.8, (24, 24, 3))
    signs = rng.choice([-1.0, 1.0], base.shape)
    assert round(psnr(ImageBuffer(base), ImageBuffer(base + 0.1 * signs)), 2) == 20.00
    for k in range(5):
        x = rng.uniform(0, 1, (32, 48, 3))
        y = np.clip(x + rng.normal(0, 0.1 + 0.05 * k, x.shape), 0, 1)
        ref = structural_similarity(
            x, y, gaussian_weights=True, sigma=1.5, use_sample_covariance=False, data_range=1.0, channel_axis=-1
        )
        assert abs(ssim(ImageBuffer(x), ImageBuffer(y)) - ref) < 1e-4


# --- 11 ----------------------------------------------------------------------


@criterion(11, "two identical single-threaded bench runs write byte-identical metrics.csv")
def test_determinism(tmp_path):
    outputs = []
    for name in ("a", "b"):
        cfg = RunConfig(iterations=40, repeats=2, threads=1, seed=11, out=str(tmp_path / name))
        cfg.densify_default.start = 10
        cfg.densify_default.interval = 10
        cfg.densify_default.stop = 30
        cmd_bench(cfg, ["synthetic"])
        outputs.append((tmp_path / name / METRICS).read_bytes())
    assert outputs[0] == outputs[1]
    assert outputs[0].count(b"\n") == 1 + 2 * 5
