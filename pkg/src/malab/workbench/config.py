"""Flat line-oriented experiment configuration.

Files hold `section.key = value` lines; `#` starts a comment. Unknown keys
and out-of-range values are rejected at parse time, so a config that parses
is a config that runs. Shipped fixtures under `configs/` transcribe the
hyperparameter rows of the large pretrained models; they exercise the
schema but configure nothing executable here.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from ..dit import DiTConfig
from ..diffusion import NoiseSchedule
from ..guidance import MODES as GUIDANCE_MODES


class ConfigError(Exception):
    """Malformed or out-of-range configuration."""


@dataclass
class ModelSection:
    blocks: int = 6
    hidden: int = 64
    heads: int = 4
    token_grid: tuple[int, int] = (4, 4)
    data_dim: int = 2
    classes: int = 9
    t_embed_dim: int = 64


@dataclass
class ScheduleSection:
    sigma_max: float = 3.0
    steps: int = 40


@dataclass
class DetectionSection:
    kappa: float = 30.0
    rho: float = 0.9
    kappa_token: float = 10.0


@dataclass
class GuidanceSection:
    mode: str = "cond"
    lam: float = 3.0
    w: float = 1.0
    m: int | None = None          # disruption depth; None = blocks // 2
    dims: tuple[int, ...] = ()    # explicit mask dims; empty = use detection


@dataclass
class RunSection:
    seed: int = 0
    train_steps: int = 5000
    batch_size: int = 32
    learning_rate: float = 3e-4
    cond_drop_prob: float = 0.1
    sample_count: int = 512
    draws: int = 64
    class_id: int = 0
    out_dir: str = "out"
    checkpoint: str = "model.ckpt"


@dataclass
class ExperimentConfig:
    model: ModelSection = field(default_factory=ModelSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    detection: DetectionSection = field(default_factory=DetectionSection)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)
    run: RunSection = field(default_factory=RunSection)

    def dit_config(self) -> DiTConfig:
        m = self.model
        return DiTConfig(
            num_blocks=m.blocks, hidden_size=m.hidden, num_heads=m.heads,
            token_grid=m.token_grid, data_dim=m.data_dim,
            num_classes=m.classes, t_embed_dim=m.t_embed_dim,
            t_max=self.schedule.sigma_max)

    def noise_schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.schedule.sigma_max, self.schedule.steps)

    def disruption_depth(self) -> int:
        if self.guidance.m is not None:
            return self.guidance.m
        return max(1, self.model.blocks // 2)


_REQUIRED_SECTIONS = ("model", "schedule")

_PARSERS = {
    "int": int,
    "float": float,
    "str": str,
}


def _parse_grid(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise ValueError(f"expected HxW, got {text!r}")
    return int(parts[0]), int(parts[1])


def _parse_dims(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(int(p) for p in text.split(","))


# key -> (section attr, field attr, converter, validator, description)
_SCHEMA = {
    "model.blocks": ("model", "blocks", int, lambda v: v >= 1, ">= 1"),
    "model.hidden": ("model", "hidden", int, lambda v: v >= 1, ">= 1"),
    "model.heads": ("model", "heads", int, lambda v: v >= 1, ">= 1"),
    "model.token_grid": ("model", "token_grid", _parse_grid,
                         lambda v: v[0] >= 1 and v[1] >= 1, "positive extents"),
    "model.data_dim": ("model", "data_dim", int, lambda v: v >= 1, ">= 1"),
    "model.classes": ("model", "classes", int, lambda v: v >= 2, ">= 2"),
    "model.t_embed_dim": ("model", "t_embed_dim", int,
                          lambda v: v >= 2 and v % 2 == 0, "positive and even"),
    "schedule.sigma_max": ("schedule", "sigma_max", float,
                           lambda v: v > 0, "> 0"),
    "schedule.steps": ("schedule", "steps", int, lambda v: v >= 1, ">= 1"),
    "detection.kappa": ("detection", "kappa", float, lambda v: v > 1, "> 1"),
    "detection.rho": ("detection", "rho", float,
                      lambda v: 0 < v <= 1, "in (0, 1]"),
    "detection.kappa_token": ("detection", "kappa_token", float,
                              lambda v: v > 0, "> 0"),
    "guidance.mode": ("guidance", "mode", str,
                      lambda v: v in GUIDANCE_MODES,
                      f"one of {GUIDANCE_MODES}"),
    "guidance.lambda": ("guidance", "lam", float, lambda v: v >= 0, ">= 0"),
    "guidance.w": ("guidance", "w", float, lambda v: v >= 0, ">= 0"),
    "guidance.m": ("guidance", "m", int, lambda v: v >= 1, ">= 1"),
    "guidance.dims": ("guidance", "dims", _parse_dims,
                      lambda v: all(d >= 0 for d in v), "nonnegative"),
    "run.seed": ("run", "seed", int, lambda v: v >= 0, ">= 0"),
    "run.train_steps": ("run", "train_steps", int, lambda v: v >= 0, ">= 0"),
    "run.batch_size": ("run", "batch_size", int, lambda v: v >= 1, ">= 1"),
    "run.learning_rate": ("run", "learning_rate", float,
                          lambda v: v > 0, "> 0"),
    "run.cond_drop_prob": ("run", "cond_drop_prob", float,
                           lambda v: 0 <= v <= 1, "in [0, 1]"),
    "run.sample_count": ("run", "sample_count", int, lambda v: v >= 1, ">= 1"),
    "run.draws": ("run", "draws", int, lambda v: v >= 1, ">= 1"),
    "run.class_id": ("run", "class_id", int, lambda v: v >= 0, ">= 0"),
    "run.out_dir": ("run", "out_dir", str, lambda v: bool(v), "nonempty"),
    "run.checkpoint": ("run", "checkpoint", str, lambda v: bool(v), "nonempty"),
}


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate `section.key = value` lines into a config."""
    config = ExperimentConfig()
    seen_sections: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        section, attr, convert, valid, hint = _SCHEMA[key]
        try:
            parsed = convert(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {key} = {value!r}: {exc}") from None
        if not valid(parsed):
            raise ConfigError(
                f"line {lineno}: {key} = {value!r} out of range (must be {hint})")
        setattr(getattr(config, section), attr, parsed)
        seen_sections.add(section)

    for section in _REQUIRED_SECTIONS:
        if section not in seen_sections:
            raise ConfigError(f"missing required section {section!r}")
    _validate_cross(config)
    return config


def _validate_cross(config: ExperimentConfig) -> None:
    m, g = config.model, config.guidance
    if m.hidden % m.heads != 0:
        raise ConfigError(
            f"model.hidden {m.hidden} not divisible by model.heads {m.heads}")
    if g.m is not None and g.m > m.blocks:
        raise ConfigError(
            f"guidance.m {g.m} exceeds model.blocks {m.blocks}")
    if any(d >= m.hidden for d in g.dims):
        raise ConfigError(
            f"guidance.dims {g.dims} outside [0, {m.hidden})")
    if config.run.class_id >= m.classes:
        raise ConfigError(
            f"run.class_id {config.run.class_id} outside [0, {m.classes})")


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())
