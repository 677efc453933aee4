import numpy as np
import pytest
from scipy import stats as scistats

from oracles import random_cloud
from tilesplat.errors import BudgetViolation, ShapeMismatch
from tilesplat.membench import Arena, BufferSet
from tilesplat.optim import (
    AdamState,
    DefaultDensifyOptions,
    DensifyStats,
    LearningRates,
    MCMCOptions,
    adam_step,
    densify_default,
    densify_mcmc,
    sample_relocation_targets,
    split_opacity,
)
from tilesplat.scene import GaussianCloud, logit, normalize_rotations

LRS = {"positions": 0.1, "log_scales": 0.1, "rotations": 0.1, "opacity_logits": 0.1, "colors": 0.1}


def zero_grads(cloud):
    return GaussianCloud(**{k: np.zeros_like(v) for k, v in cloud.arrays().items()})


def test_adam_zero_gradient_is_identity():
    cloud = normalize_rotations(random_cloud(np.random.default_rng(0), 8))
    state = AdamState.for_cloud(cloud, LRS)
    out, state2 = adam_step(cloud, zero_grads(cloud), state)
    assert state2.step_count == 1
    for name, arr in cloud.arrays().items():
        np.testing.assert_allclose(getattr(out, name), arr, rtol=0, atol=1e-15)


def test_adam_first_step():
    cloud = normalize_rotations(random_cloud(np.random.default_rng(1), 1))
    grads = zero_grads(cloud).with_arrays(positions=np.ones((1, 3)))
    out, _ = adam_step(cloud, grads, AdamState.for_cloud(cloud, LRS))
    np.testing.assert_allclose(out.positions - cloud.positions, -0.1 / (1 + 1e-8), rtol=1e-12)


@pytest.mark.parametrize("lr, monotone", [(0.01, False), (0.001, True)])
def test_adam_minimizes_square(lr, monotone):
    cloud = normalize_rotations(random_cloud(np.random.default_rng(2), 1)).with_arrays(positions=np.ones((1, 3)))
    state = AdamState.for_cloud(cloud, {**LRS, "positions": lr})
    values = [float(cloud.positions[0, 0] ** 2)]
    for _ in range(100):
        grads = zero_grads(cloud).with_arrays(positions=2 * cloud.positions)
        cloud, state = adam_step(cloud, grads, state)
        values.append(float(cloud.positions[0, 0] ** 2))
    assert values[-1] < values[0]
    if monotone:
        assert all(b < a for a, b in zip(values, values[1:]))


def test_adam_shape_mismatch():
    cloud = random_cloud(np.random.default_rng(0), 4)
    state = AdamState.for_cloud(cloud, LRS)
    with pytest.raises(ShapeMismatch):
        adam_step(cloud, zero_grads(cloud.take(slice(0, 3))), state)


def test_adam_clips_colors_and_normalizes_rotations():
    cloud = random_cloud(np.random.default_rng(3), 5).with_arrays(colors=np.full((5, 3), 0.99))
    grads = zero_grads(cloud).with_arrays(colors=-np.ones((5, 3)))
    out, _ = adam_step(cloud, grads, AdamState.for_cloud(cloud, LRS))
    assert np.all(out.colors == 1.0)
    np.testing.assert_allclose(np.linalg.norm(out.rotations, axis=1), 1, atol=1e-12)


def test_learning_rate_schedule():
    lr = LearningRates()
    assert lr.position(0, 2.0) == pytest.approx(3.2e-4)
    assert lr.position(30_000, 2.0) == pytest.approx(3.2e-6)
    assert lr.position(15_000, 1.0) == pytest.approx(1.6e-5)
    assert lr.for_step(0, 1.0)["opacity_logits"] == 0.05


# --- default densification ----------------------------------------------------


def densify_setup(n=6, opac=0.5, scale=0.001):
    rng = np.random.default_rng(4)
    cloud = random_cloud(rng, n).with_arrays(
        opacity_logits=np.full(n, logit(opac)), log_scales=np.full((n, 3), np.log(scale))
    )
    state = AdamState.for_cloud(cloud, LRS)
    state.first_moment["positions"][:] = 1.0
    stats = DensifyStats.zeros(n)
    return cloud, state, stats


OPTS = DefaultDensifyOptions(interval=10, start=0, stop=100, opacity_reset_interval=1000)


def run_default(cloud, state, stats, iteration=10, opts=OPTS, buffers=None):
    return densify_default(
        cloud, state, stats, iteration, opts, iterations=200, extent=1.0, rng=np.random.default_rng(0), buffers=buffers
    )


def test_densify_nothing_to_do():
    cloud, state, stats = densify_setup()
    out, state2, stats2, report = run_default(cloud, state, stats)
    assert out.count == cloud.count
    for name, arr in cloud.arrays().items():
        np.testing.assert_array_equal(getattr(out, name), arr)
    assert (report.cloned, report.split, report.pruned) == (0, 0, 0)


def test_densify_off_schedule_is_noop():
    cloud, state, stats = densify_setup()
    stats.accumulate(np.full(cloud.count, 1.0), np.ones(cloud.count, bool))
    out, *_ = run_default(cloud, state, stats, iteration=15)
    assert out.count == cloud.count


def test_densify_clone_small():
    cloud, state, stats = densify_setup()
    norms = np.zeros(cloud.count)
    norms[2] = 1.0
    stats.accumulate(norms, np.ones(cloud.count, bool))
    out, state2, stats2, report = run_default(cloud, state, stats)
    assert out.count == cloud.count + 1 and report.cloned == 1
    for name, arr in cloud.arrays().items():
        np.testing.assert_array_equal(getattr(out, name)[-1], arr[2])
    assert np.all(state2.first_moment["positions"][-1] == 0)
    assert state2.count == stats2.grad_accum.size == out.count


def test_densify_split_large():
    cloud, state, stats = densify_setup(scale=0.1)
    norms = np.zeros(cloud.count)
    norms[1] = 1.0
    stats.accumulate(norms, np.ones(cloud.count, bool))
    out, state2, _, report = run_default(cloud, state, stats)
    assert report.split == 1 and out.count == cloud.count + 1
    np.testing.assert_allclose(out.scales[-2:], np.tile(cloud.scales[1] / 1.6, (2, 1)))
    assert not np.any(np.all(out.positions == cloud.positions[1], axis=1))
    assert np.all(state2.second_moment["colors"][-2:] == 0)


def test_densify_prune_only_sub_threshold():
    cloud, state, stats = densify_setup()
    logits = cloud.opacity_logits.copy()
    logits[[0, 3]] = logit(0.001)
    logits[4] = logit(0.006)
    cloud = cloud.with_arrays(opacity_logits=logits)
    out, state2, _, report = run_default(cloud, state, stats)
    assert report.pruned == 2 and out.count == 4
    assert np.all(out.opacities >= 0.005) and np.all((out.opacities > 0) & (out.opacities < 1))
    np.testing.assert_array_equal(out.positions, cloud.positions[[1, 2, 4, 5]])


def test_densify_opacity_reset():
    cloud, state, stats = densify_setup(opac=0.9)
    opts = DefaultDensifyOptions(interval=1000, start=0, stop=100, opacity_reset_interval=20)
    out, *_, report = run_default(cloud, state, stats, iteration=20, opts=opts)
    assert report.opacity_reset
    assert np.all(out.opacities <= 0.01 + 1e-12)


def test_densify_reports_buffer_resizes():
    cloud, state, stats = densify_setup()
    arena = Arena()
    buffers = BufferSet(arena, {"params": 56}, cloud.count)
    stats.accumulate(np.ones(cloud.count), np.ones(cloud.count, bool))
    out, *_, report = run_default(cloud, state, stats, buffers=buffers)
    assert out.count == 2 * cloud.count
    assert [e.event for e in report.resize_events] == ["resize"]
    assert arena.live[buffers.handles["params"]][1] == 56 * out.count


def test_default_stop_fraction():
    assert DefaultDensifyOptions().stop_for(30_000) == 15_000
    assert DefaultDensifyOptions(stop=7).stop_for(30_000) == 7


# --- MCMC ---------------------------------------------------------------------


def mcmc_setup(n=64, dead=()):
    rng = np.random.default_rng(5)
    cloud = normalize_rotations(random_cloud(rng, n))
    logits = logit(rng.uniform(0.1, 0.9, n))
    logits[list(dead)] = logit(0.001)
    return cloud.with_arrays(opacity_logits=logits), AdamState.for_cloud(cloud, LRS)


def run_mcmc(cloud, state, opts, iteration=100, seed=0):
    return densify_mcmc(
        cloud, state, iteration, opts, iterations=1000, position_lr=1e-4, rng=np.random.default_rng(seed)
    )


def test_mcmc_budget_preserved():
    cloud, state = mcmc_setup(dead=range(10))
    opts = MCMCOptions(budget=64)
    for it in range(1, 301):
        cloud, state, _ = run_mcmc(cloud, state, opts, iteration=it, seed=it)
        assert cloud.count == 64 == state.count


def test_mcmc_budget_violation():
    cloud, state = mcmc_setup()
    with pytest.raises(BudgetViolation):
        run_mcmc(cloud, state, MCMCOptions(budget=65))


def test_mcmc_no_dead_no_noise_is_identity():
    cloud, state = mcmc_setup()
    out, _, relocated = run_mcmc(cloud, state, MCMCOptions(budget=64, noise_scale=0))
    assert relocated == 0
    np.testing.assert_array_equal(out.positions, cloud.positions)


def test_mcmc_relocates_dead():
    cloud, state = mcmc_setup(dead=[3, 7])
    out, state2, relocated = run_mcmc(cloud, state, MCMCOptions(budget=64, noise_scale=0))
    assert relocated == 2
    assert np.all(out.opacities >= 0.005)
    assert np.all(state2.first_moment["positions"][[3, 7]] == 0)


def test_relocation_sampling_proportional_to_opacity():
    rng = np.random.default_rng(6)
    opac = rng.uniform(0.01, 1.0, 20)
    alive = np.ones(20, bool)
    alive[[4, 9]] = False
    draws = sample_relocation_targets(opac, alive, 100_000, np.random.default_rng(7))
    freq = np.bincount(draws, minlength=20)
    assert freq[4] == freq[9] == 0
    p = np.where(alive, opac, 0) / opac[alive].sum()
    assert np.max(np.abs(freq / 100_000 - p)) < 0.01
    chi2 = scistats.chisquare(freq[alive], 100_000 * p[alive])
    assert chi2.pvalue > 0.001


@pytest.mark.parametrize("o", [0.05, 0.3, 0.5, 0.9, 0.99])
def test_split_opacity(o):
    assert split_opacity(o, 1) == pytest.approx(1 - np.sqrt(1 - o), rel=1e-12)
    for k in (1, 2, 5):
        new = split_opacity(o, k)
        assert 1 - (1 - new) ** (k + 1) == pytest.approx(o, rel=1e-12)
    assert split_opacity(o, 0) == pytest.approx(o)
