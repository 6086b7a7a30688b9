"""Run configuration: a flat dotted-key text format with full validation.

Config files are plain text, one ``key = value`` per line, ``#`` comments
allowed. Keys live in three namespaces: ``world.*`` (simulator and
sensors), ``train.*`` (optimization), and ``run.*`` (command-level knobs).
Unset keys take the published defaults. The resolved configuration is
echoed (sorted, with derived values) next to every artifact, and its
sha256 is the config hash stored in checkpoints.

Example::

    world.lidar_beams = 1081
    world.occlusion_rate = 0.05
    train.epochs = 20
    run.seeds = 1,2,3
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .fusion import VARIANTS
from .labeling import lidar_occlusion_sector
from .training import TrainConfig
from .world import WorldConfig

__all__ = [
    "RunSettings",
    "RunConfig",
    "parse_config_text",
    "build_run_config",
    "load_run_config",
    "resolved_text",
    "config_hash",
]


@dataclass(frozen=True)
class RunSettings:
    """Command-level knobs that are neither world nor optimizer settings."""

    episodes: int = 200
    variants: tuple[str, ...] = ("full",)
    seeds: tuple[int, ...] = (0,)
    stress_k: int = 3
    stress_episodes: int = 20
    test_fraction: float = 0.2

    def validate(self) -> None:
        problems = []
        if self.episodes < 1:
            problems.append("run.episodes must be >= 1")
        if not self.variants:
            problems.append("run.variants must not be empty")
        for v in self.variants:
            if v not in VARIANTS:
                problems.append(f"run.variants: unknown variant {v!r}")
        if not self.seeds:
            problems.append("run.seeds must not be empty")
        if self.stress_k < 0:
            problems.append("run.stress_k must be >= 0")
        if self.stress_episodes < 1:
            problems.append("run.stress_episodes must be >= 1")
        if not 0.0 < self.test_fraction < 1.0:
            problems.append("run.test_fraction must be in (0, 1)")
        if problems:
            raise ConfigError("; ".join(problems))


@dataclass(frozen=True)
class RunConfig:
    world: WorldConfig
    train: TrainConfig
    run: RunSettings
    provided: frozenset[str] = frozenset()  # keys the user set explicitly


_SECTIONS = {
    "world": WorldConfig,
    "train": TrainConfig,
    "run": RunSettings,
}

_TUPLE_ELEMENT_TYPES = {
    "world.occlusion_duration_range": int,
    "world.obstacle_radius_range": float,
    "run.variants": str,
    "run.seeds": int,
}


def _known_keys() -> dict[str, type]:
    keys = {}
    for section, cls in _SECTIONS.items():
        for f in dataclasses.fields(cls):
            keys[f"{section}.{f.name}"] = type(getattr(cls(), f.name))
    return keys


def parse_config_text(text: str) -> dict[str, str]:
    """Raw key -> value strings; syntax errors are itemized."""
    values: dict[str, str] = {}
    problems = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
            continue
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            problems.append(f"line {lineno}: empty key")
            continue
        if key in values:
            problems.append(f"line {lineno}: duplicate key {key!r}")
            continue
        values[key] = value
    if problems:
        raise ConfigError("; ".join(problems))
    return values


def _convert(key: str, raw: str, target_type: type):
    if target_type is bool:
        lowered = raw.lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if target_type is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if target_type is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    if target_type is tuple:
        element_type = _TUPLE_ELEMENT_TYPES.get(key, str)
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        try:
            return tuple(element_type(p) for p in parts)
        except ValueError:
            raise ConfigError(f"{key}: expected a comma-separated list, got {raw!r}") from None
    return raw


def build_run_config(values: dict[str, str]) -> RunConfig:
    """Typed, validated RunConfig from raw key/value strings."""
    known = _known_keys()
    problems = [f"unknown key {k!r}" for k in values if k not in known]
    if problems:
        raise ConfigError("; ".join(sorted(problems)))

    typed: dict[str, dict] = {section: {} for section in _SECTIONS}
    for key, raw in values.items():
        section, field_name = key.split(".", 1)
        value = raw if isinstance(raw, (int, float, bool, tuple)) else _convert(key, str(raw), known[key])
        typed[section][field_name] = value

    try:
        world = WorldConfig(**typed["world"])
        train = TrainConfig(**typed["train"])
        run = RunSettings(**typed["run"])
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    problems = []
    for obj, label in ((world, "world"), (train, "train"), (run, "run")):
        try:
            obj.validate()
        except ConfigError as exc:
            problems.append(f"{label}: {exc}")
    if problems:
        raise ConfigError("; ".join(problems))
    return RunConfig(world=world, train=train, run=run, provided=frozenset(values))


def load_run_config(path: str | Path | None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Parse an optional config file, apply overrides, validate everything."""
    values: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        values.update(parse_config_text(p.read_text()))
    for key, value in (overrides or {}).items():
        values[key] = value
    return build_run_config(values)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def resolved_text(config: RunConfig) -> str:
    """Canonical echo of every setting plus derived quantities."""
    lines = []
    for section, obj in (("world", config.world), ("train", config.train), ("run", config.run)):
        for f in sorted(dataclasses.fields(obj), key=lambda f: f.name):
            lines.append(f"{section}.{f.name} = {_format_value(getattr(obj, f.name))}")
    start, length = lidar_occlusion_sector(config.world.lidar_beams, config.world.lidar_fov)
    lines.append(f"derived.frames_per_episode = {config.world.n_frames}")
    lines.append(f"derived.lidar_occ_sector_len = {length}")
    lines.append(f"derived.lidar_occ_sector_start = {start}")
    return "\n".join(lines) + "\n"


def config_hash(config: RunConfig) -> str:
    """sha256 over the model-determining sections (world and train).

    Command-level ``run.*`` knobs (how many stress episodes, which seeds to
    sweep) do not change what a checkpoint is, so they stay out of the hash.
    """
    lines = [
        line
        for line in resolved_text(config).splitlines()
        if line.startswith(("world.", "train."))
    ]
    return hashlib.sha256(("\n".join(lines) + "\n").encode("utf-8")).hexdigest()
