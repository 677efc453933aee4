"""Run configuration: dataclasses plus an INI loader.

Sections map onto the dataclasses below::

    [run]             RunConfig scalars (iterations, densify, seed, ...)
    [synthetic]       SyntheticSpec
    [optimizer]       LearningRates
    [densify.default] DefaultDensifyOptions
    [densify.mcmc]    MCMCOptions
    [membench]        MembenchOptions
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .optim import DefaultDensifyOptions, LearningRates, MCMCOptions


@dataclass
class SyntheticSpec:
    seed: int = 0
    n_gaussians: int = 64
    n_cameras: int = 3
    width: int = 64
    height: int = 64
    position_noise: float = 0.05
    color_noise: float = 0.1


@dataclass
class MembenchOptions:
    growth_factor: float = 1.5
    copy_window: float = 1e-3
    poll_rate_hz: float = 1.0


@dataclass
class RunConfig:
    scene: str = "synthetic"
    downscale: int = 1
    n_init: int = 1000
    iterations: int = 500
    densify: str = "default"
    budget: int = 1_000_000
    max_gaussians: int = 0
    tile_size: int = 16
    lambda_dssim: float = 0.2
    seed: int = 0
    repeats: int = 5
    preallocate: bool = False
    threads: int = 1
    out: str = "out"
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    optimizer: LearningRates = field(default_factory=LearningRates)
    densify_default: DefaultDensifyOptions = field(default_factory=DefaultDensifyOptions)
    densify_mcmc: MCMCOptions = field(default_factory=MCMCOptions)
    membench: MembenchOptions = field(default_factory=MembenchOptions)

    def validate(self) -> RunConfig:
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if self.densify not in ("default", "mcmc"):
            raise ConfigError(f"densify must be 'default' or 'mcmc', not {self.densify!r}")
        if self.densify == "mcmc" and self.budget < 1:
            raise ConfigError("budget must be >= 1 in mcmc mode")
        if self.preallocate and self.densify == "default" and self.max_gaussians < 1:
            raise ConfigError("preallocate with default densification needs max_gaussians")
        if self.tile_size < 1 or self.threads < 1 or self.downscale < 1:
            raise ConfigError("tile_size, threads and downscale must be >= 1")
        return self

    @property
    def mcmc(self) -> MCMCOptions:
        return dataclasses.replace(self.densify_mcmc, budget=self.budget)


SECTIONS = {
    "synthetic": "synthetic",
    "optimizer": "optimizer",
    "densify.default": "densify_default",
    "densify.mcmc": "densify_mcmc",
    "membench": "membench",
}


def _coerce(raw: str, hint, key: str):
    if typing.get_origin(hint) in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if raw.strip().lower() in ("", "none"):
            return None
        hint = args[0] if args else str
    try:
        if hint is bool:
            return configparser.ConfigParser.BOOLEAN_STATES[raw.strip().lower()]
        if hint is int:
            return int(float(raw)) if "e" in raw.lower() else int(raw)
        if hint is float:
            return float(raw)
        return raw.strip()
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad value {raw!r} for {key}") from exc


def _apply(obj, items, section: str):
    hints = typing.get_type_hints(type(obj))
    names = {f.name for f in dataclasses.fields(obj)}
    for key, raw in items:
        attr = key.replace("-", "_")
        if attr not in names or dataclasses.is_dataclass(getattr(obj, attr)):
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        setattr(obj, attr, _coerce(raw, hints[attr], f"[{section}] {key}"))


def load_config(path=None, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser(interpolation=None)
    try:
        if not parser.read(Path(path)):
            raise ConfigError(f"cannot read config file {path}")
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    for section in parser.sections():
        items = parser.items(section, raw=True)
        if section == "run":
            _apply(cfg, items, section)
        elif section in SECTIONS:
            _apply(getattr(cfg, SECTIONS[section]), items, section)
        else:
            raise ConfigError(f"unknown section [{section}]")
    return cfg


def dump_config(cfg: RunConfig) -> str:
    """Every setting with its current value, in the loader's format."""
    parser = configparser.ConfigParser(interpolation=None)
    parser["run"] = {
        f.name: str(getattr(cfg, f.name))
        for f in dataclasses.fields(cfg)
        if not dataclasses.is_dataclass(getattr(cfg, f.name))
    }
    for section, attr in SECTIONS.items():
        parser[section] = {k: str(v) for k, v in dataclasses.asdict(getattr(cfg, attr)).items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
