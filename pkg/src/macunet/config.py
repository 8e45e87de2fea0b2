"""``key = value`` run configuration files."""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .models import VARIANTS, NetworkConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: str = "macu"
    levels: int = 5
    base_width: int = 16
    classes: int = 6
    lr: float = 0.0003
    lr_min: float = 0.0
    epochs: int = 50
    batch_size: int = 8
    seed: int = 0
    precision: str = "f32"
    cab_ratio: int = 16

    def __post_init__(self):
        if self.model not in VARIANTS:
            raise ConfigError(f"model must be one of {', '.join(VARIANTS)}, got {self.model!r}")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def network(self, in_channels: int = 3) -> NetworkConfig:
        try:
            return NetworkConfig(variant=self.model, levels=self.levels, base_width=self.base_width,
                                 classes=self.classes, in_channels=in_channels,
                                 cab_ratio=self.cab_ratio)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def dump(self) -> str:
        """Effective configuration, one ``key = value`` per line."""
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


def parse_config(text: str) -> RunConfig:
    types = {f.name: f.type for f in fields(RunConfig)}
    defaults = RunConfig()
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (part.strip() for part in line.partition("="))
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        kind = type(getattr(defaults, key))
        try:
            values[key] = kind(value) if kind is not int else int(value, 10)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from exc
    return RunConfig(**values)


def load_config(path: Optional[Union[str, Path]]) -> RunConfig:
    if path is None:
        return RunConfig()
    return parse_config(Path(path).read_text())
