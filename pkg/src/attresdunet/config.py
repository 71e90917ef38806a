"""Run configuration: a flat ``section.key = value`` text format.

Example::

    # toy run
    model.variant = full_attention
    model.width_mult = 0.125
    model.aspp_rates = 1, 2, 3
    train.lr = 1e-4
    cc.enabled = true

Unknown sections or keys are errors, so a typo never silently falls back to a
default.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Optional

from .model import TOY_CONFIG, ModelConfig
from .pipeline import AugmentPolicy, ColorConstancyConfig
from .trainer import TrainConfig


class ConfigParseError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class DataConfig:
    """Synthetic dataset size/seed and the split seed."""

    n_samples: int = 240
    seed: int = 0
    split_seed: int = 0


@dataclass(frozen=True)
class CCSection:
    enabled: bool = True
    p: float = 6.0
    target: str = "mean"

    def build(self) -> Optional[ColorConstancyConfig]:
        return ColorConstancyConfig(self.p, self.target) if self.enabled else None


@dataclass(frozen=True)
class AugmentSection:
    ops: tuple[str, ...] = ("rot90", "hflip", "vflip", "brightness_contrast")
    brightness: float = 0.1
    contrast: float = 0.1
    factor: int = 1
    photometric_prob: float = 0.5

    def build(self) -> Optional[AugmentPolicy]:
        if self.factor <= 1:
            return None
        return AugmentPolicy(frozenset(self.ops), self.brightness, self.contrast, self.factor, self.photometric_prob)


@dataclass(frozen=True)
class AblationSection:
    seeds: int = 3
    max_epochs: int = 20


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = TOY_CONFIG
    train: TrainConfig = TrainConfig()
    cc: CCSection = CCSection()
    augment: AugmentSection = AugmentSection()
    data: DataConfig = DataConfig()
    ablate: AblationSection = AblationSection()
    seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        """Round-trippable ``key = value`` rendering."""
        lines = [f"seed = {self.seed}"]
        for section in SECTIONS:
            obj = getattr(self, section)
            for f in fields(obj):
                lines.append(f"{section}.{f.name} = {_render(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"


SECTIONS = ("model", "train", "cc", "augment", "data", "ablate")


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    return str(value)


def _coerce(raw: str, default: Any, name: str):
    """Parse ``raw`` into the type of ``default``."""
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.strip("()[]").split(",") if s.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(s) for s in items)
            if default and isinstance(default[0], float):
                return tuple(float(s) for s in items)
            return tuple(items)
        return raw
    except ValueError as exc:
        raise ConfigParseError(f"bad value for {name}: {exc}") from None


def parse_assignments(text: str) -> list[tuple[str, str, int]]:
    """``(key, raw value, line number)`` for every assignment line."""
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigParseError(f"expected 'key = value', got {line!r}", lineno)
        key, value = line.split("=", 1)
        out.append((key.strip(), value.strip(), lineno))
    return out


def apply_overrides(config: RunConfig, assignments) -> RunConfig:
    """Return ``config`` with each ``(key, raw, line)`` assignment applied."""
    updates: dict[str, dict[str, Any]] = {s: {} for s in SECTIONS}
    seed = config.seed
    for key, raw, lineno in assignments:
        if key == "seed":
            seed = _coerce(raw, 0, key)
            continue
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigParseError(f"unknown key {key!r}", lineno)
        obj = getattr(config, section)
        known = {f.name for f in fields(obj)}
        if name not in known:
            raise ConfigParseError(f"unknown key {key!r}; {section} accepts {sorted(known)}", lineno)
        updates[section][name] = _coerce(raw, getattr(obj, name), key)
    try:
        sections = {s: replace(getattr(config, s), **updates[s]) for s in SECTIONS}
    except ValueError as exc:
        raise ConfigParseError(str(exc)) from None
    return RunConfig(seed=seed, **sections)


def load_config(path=None, overrides=()) -> RunConfig:
    """Toy defaults, then the file at ``path``, then ``overrides``."""
    config = RunConfig()
    if path is not None:
        config = apply_overrides(config, parse_assignments(Path(path).read_text()))
    config = apply_overrides(config, [(k, v, None) for k, v in overrides])
    config.model.validate()
    return config


def config_from_record(path) -> RunConfig:
    """Rebuild the config stored in a run's ``run.json``."""
    record = json.loads(Path(path).read_text())
    return apply_overrides(RunConfig(), parse_assignments(record["config_text"]))
