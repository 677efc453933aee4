"""Adam updates and the two densification strategies (adaptive and fixed-budget)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import BudgetViolation, ShapeMismatch
from .scene import CLOUD_FIELDS, GaussianCloud, logit, normalize_rotations, quaternion_to_matrix, sigmoid

GROUPS = tuple(name for name, _ in CLOUD_FIELDS)


@dataclass
class LearningRates:
    position_init: float = 1.6e-4
    position_final: float = 1.6e-6
    position_max_steps: int = 30_000
    log_scales: float = 0.005
    rotations: float = 0.001
    opacity_logits: float = 0.05
    colors: float = 0.0025

    def position(self, step: int, extent: float) -> float:
        """Log-linear decay from ``position_init`` to ``position_final``, times extent."""
        frac = min(max(step / self.position_max_steps, 0.0), 1.0)
        lr = math.exp((1 - frac) * math.log(self.position_init) + frac * math.log(self.position_final))
        return lr * extent

    def for_step(self, step: int, extent: float) -> dict[str, float]:
        return {
            "positions": self.position(step, extent),
            "log_scales": self.log_scales,
            "rotations": self.rotations,
            "opacity_logits": self.opacity_logits,
            "colors": self.colors,
        }


@dataclass
class AdamState:
    first_moment: dict[str, np.ndarray]
    second_moment: dict[str, np.ndarray]
    lrs: dict[str, float]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_cloud(cls, cloud: GaussianCloud, lrs: dict[str, float], **kw) -> AdamState:
        zeros = {k: np.zeros_like(v) for k, v in cloud.arrays().items()}
        return cls({k: v.copy() for k, v in zeros.items()}, zeros, dict(lrs), **kw)

    @property
    def count(self) -> int:
        return len(self.first_moment["positions"])

    def take(self, index) -> AdamState:
        return replace(
            self,
            first_moment={k: v[index] for k, v in self.first_moment.items()},
            second_moment={k: v[index] for k, v in self.second_moment.items()},
        )

    def extended(self, n: int) -> AdamState:
        """Append zero moments for ``n`` new Gaussians."""
        def grow(d):
            return {k: np.concatenate([v, np.zeros((n, *v.shape[1:]), v.dtype)]) for k, v in d.items()}
        return replace(self, first_moment=grow(self.first_moment), second_moment=grow(self.second_moment))

    def zero_rows(self, index, groups=GROUPS) -> AdamState:
        first = {k: v.copy() for k, v in self.first_moment.items()}
        second = {k: v.copy() for k, v in self.second_moment.items()}
        for g in groups:
            first[g][index] = 0
            second[g][index] = 0
        return replace(self, first_moment=first, second_moment=second)


def adam_step(cloud: GaussianCloud, grads: GaussianCloud, state: AdamState) -> tuple[GaussianCloud, AdamState]:
    if grads.count != cloud.count or state.count != cloud.count:
        raise ShapeMismatch(
            f"cloud has {cloud.count} Gaussians, gradients {grads.count}, optimizer state {state.count}"
        )
    step = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1 - b1**step, 1 - b2**step
    params, first, second = {}, {}, {}
    for name, p in cloud.arrays().items():
        g = getattr(grads, name)
        m = b1 * state.first_moment[name] + (1 - b1) * g
        v = b2 * state.second_moment[name] + (1 - b2) * g * g
        update = state.lrs[name] * (m / c1) / (np.sqrt(v / c2) + state.eps)
        params[name] = (p - update).astype(p.dtype)
        first[name], second[name] = m.astype(p.dtype), v.astype(p.dtype)
    params["colors"] = np.clip(params["colors"], 0.0, 1.0)
    new_cloud = normalize_rotations(GaussianCloud(**params))
    return new_cloud, replace(state, first_moment=first, second_moment=second, step_count=step)


@dataclass
class DensifyStats:
    grad_accum: np.ndarray
    denom: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> DensifyStats:
        return cls(np.zeros(n), np.zeros(n))

    def accumulate(self, screen_norms: np.ndarray, visible: np.ndarray) -> None:
        self.grad_accum += np.where(visible, screen_norms, 0)
        self.denom += visible

    def mean(self) -> np.ndarray:
        return np.where(self.denom > 0, self.grad_accum / np.maximum(self.denom, 1), 0)


@dataclass
class DefaultDensifyOptions:
    interval: int = 100
    start: int = 500
    stop: int | None = None
    stop_fraction: float = 0.5
    grad_threshold: float = 2e-4
    split_factor: float = 1.6
    percent_dense: float = 0.01
    prune_opacity: float = 0.005
    opacity_reset_interval: int = 3000

    def stop_for(self, iterations: int) -> int:
        return self.stop if self.stop is not None else int(self.stop_fraction * iterations)


@dataclass
class DensifyReport:
    cloned: int = 0
    split: int = 0
    pruned: int = 0
    opacity_reset: bool = False
    resize_events: list = field(default_factory=list)


def _append_clones(cloud, state, stats, rows: dict[str, np.ndarray]):
    extra = GaussianCloud(**rows)
    cloud = GaussianCloud.concat([cloud, extra])
    state = state.extended(extra.count)
    stats = DensifyStats(np.r_[stats.grad_accum, np.zeros(extra.count)], np.r_[stats.denom, np.zeros(extra.count)])
    return cloud, state, stats


def densify_default(
    cloud: GaussianCloud,
    state: AdamState,
    stats: DensifyStats,
    iteration: int,
    opts: DefaultDensifyOptions,
    *,
    iterations: int,
    extent: float,
    rng: np.random.Generator,
    buffers=None,
):
    """Clone/split high-gradient Gaussians, prune transparent ones, reset opacity.

    Returns ``(cloud, state, stats, report)``.  When ``buffers`` (a
    :class:`tilesplat.membench.BufferSet`) is given, per-Gaussian buffers are
    refitted to the new count and the resulting arena events are reported.
    """
    report = DensifyReport()
    stop = opts.stop_for(iterations)
    in_window = opts.start <= iteration <= stop
    if in_window and iteration > 0 and iteration % opts.interval == 0:
        mean_grad = stats.mean()
        hot = mean_grad > opts.grad_threshold
        big = np.max(cloud.scales, axis=1) >= opts.percent_dense * extent
        clone_mask = hot & ~big
        split_mask = hot & big
        n0 = cloud.count

        if clone_mask.any():
            cloud, state, stats = _append_clones(cloud, state, stats, cloud.take(clone_mask).arrays())

        if split_mask.any():
            parents = cloud.take(np.r_[split_mask, np.zeros(cloud.count - n0, bool)])
            children = []
            for _ in range(2):
                local = rng.standard_normal(parents.positions.shape) * parents.scales
                rot = quaternion_to_matrix(parents.rotations / np.linalg.norm(parents.rotations, axis=1, keepdims=True))
                offsets = np.einsum("nij,nj->ni", rot, local)
                children.append(
                    parents.with_arrays(
                        positions=(parents.positions + offsets).astype(cloud.dtype),
                        log_scales=(parents.log_scales - np.log(opts.split_factor)).astype(cloud.dtype),
                    )
                )
            child = GaussianCloud.concat(children)
            cloud, state, stats = _append_clones(cloud, state, stats, child.arrays())
            keep = np.ones(cloud.count, bool)
            keep[np.flatnonzero(split_mask)] = False
            cloud, state = cloud.take(keep), state.take(keep)
            stats = DensifyStats(stats.grad_accum[keep], stats.denom[keep])

        prune = cloud.opacities < opts.prune_opacity
        if prune.any():
            cloud, state = cloud.take(~prune), state.take(~prune)
        report.cloned = int(clone_mask.sum())
        report.split = int(split_mask.sum())
        report.pruned = int(prune.sum())
        stats = DensifyStats.zeros(cloud.count)

    if in_window and iteration > 0 and iteration % opts.opacity_reset_interval == 0:
        ceiling = float(logit(0.01))
        cloud = cloud.with_arrays(opacity_logits=np.minimum(cloud.opacity_logits, ceiling).astype(cloud.dtype))
        state = state.zero_rows(slice(None), groups=("opacity_logits",))
        report.opacity_reset = True

    if buffers is not None:
        report.resize_events = buffers.fit(cloud.count)
    return cloud, state, stats, report


@dataclass
class MCMCOptions:
    budget: int = 1_000_000
    interval: int = 100
    start: int = 0
    stop: int | None = None
    stop_fraction: float = 0.8
    dead_opacity: float = 0.005
    noise_scale: float = 1e3
    gate_steepness: float = 100.0
    gate_center: float = 0.995
    jitter: float = 0.5

    def stop_for(self, iterations: int) -> int:
        return self.stop if self.stop is not None else int(self.stop_fraction * iterations)


def sample_relocation_targets(opacities: np.ndarray, alive: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` alive indices with probability proportional to opacity."""
    candidates = np.flatnonzero(alive)
    weights = opacities[candidates].astype(np.float64)
    return rng.choice(candidates, size=n, p=weights / weights.sum())


def split_opacity(opacity, copies):
    """Opacity each of ``copies + 1`` coincident Gaussians needs so that their
    front-to-back composite matches one Gaussian of ``opacity``."""
    return 1 - np.power(1 - opacity, 1.0 / (np.asarray(copies) + 1))


def relocation_noise(cloud: GaussianCloud, position_lr: float, opts: MCMCOptions, rng) -> np.ndarray:
    """Scale-shaped position noise, gated towards transparent Gaussians."""
    gate = sigmoid(opts.gate_steepness * ((1 - cloud.opacities) - opts.gate_center))
    local = rng.standard_normal(cloud.positions.shape) * cloud.scales
    rot = quaternion_to_matrix(cloud.rotations / np.linalg.norm(cloud.rotations, axis=1, keepdims=True))
    world = np.einsum("nij,nj->ni", rot, local)
    return position_lr * opts.noise_scale * gate[:, None] * world


def densify_mcmc(
    cloud: GaussianCloud,
    state: AdamState,
    iteration: int,
    opts: MCMCOptions,
    *,
    iterations: int,
    position_lr: float,
    rng: np.random.Generator,
) -> tuple[GaussianCloud, AdamState, int]:
    """Relocate dead Gaussians on schedule, then add positional noise.

    Returns ``(cloud, state, relocated_count)``; the count never changes.
    """
    if cloud.count != opts.budget:
        raise BudgetViolation(f"cloud holds {cloud.count} Gaussians, budget is {opts.budget}")
    relocated = 0
    stop = opts.stop_for(iterations)
    if opts.start <= iteration <= stop and iteration > 0 and iteration % opts.interval == 0:
        opac = cloud.opacities
        dead = opac < opts.dead_opacity
        if dead.any() and (~dead).any():
            dead_idx = np.flatnonzero(dead)
            targets = sample_relocation_targets(opac, ~dead, len(dead_idx), rng)
            copies = np.bincount(targets, minlength=cloud.count)
            new_opac = split_opacity(opac, copies)
            arrays = {k: v.copy() for k, v in cloud.arrays().items()}
            arrays["opacity_logits"][targets] = logit(np.clip(new_opac[targets], 1e-6, 1 - 1e-6))
            for name in arrays:
                arrays[name][dead_idx] = arrays[name][targets]
            if opts.jitter:
                src = cloud.take(targets)
                local = rng.standard_normal((len(targets), 3)) * src.scales * opts.jitter
                rot = quaternion_to_matrix(src.rotations / np.linalg.norm(src.rotations, axis=1, keepdims=True))
                arrays["positions"][dead_idx] += np.einsum("nij,nj->ni", rot, local).astype(cloud.dtype)
            cloud = GaussianCloud(**arrays)
            state = state.zero_rows(np.r_[dead_idx, np.unique(targets)])
            relocated = len(dead_idx)

    if opts.noise_scale:
        noise = relocation_noise(cloud, position_lr, opts, rng)
        cloud = cloud.with_arrays(positions=(cloud.positions + noise).astype(cloud.dtype))
    return cloud, state, relocated
