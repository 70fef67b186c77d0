"""Flat key-value run configuration with CLI overrides and a stable hash."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .losses import DEFAULT_WEIGHTING, WEIGHTING_MODES


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "LIDC-A"
    fold: int = 0
    seed: int = 0
    num_groups: int = 8  # T, must divide 512
    alpha: float = 1.0
    beta: float = 0.5
    lr0: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.00005
    tau_init: float = 0.07
    epochs: int = 100
    batch_size: int = 32
    loss_ic: bool = True
    loss_ia: bool = True
    loss_ca: bool = True
    attribute_weighting: str = DEFAULT_WEIGHTING
    encoder: str = "stub"  # {stub, pretrained}
    encoder_weights: str = ""
    augment_flips: bool = True
    val_fraction: float = 0.1
    class_name_benign: str = "benign nodule"
    class_name_unsure: str = "unsure nodule"
    class_name_malignant: str = "malignant nodule"

    def __post_init__(self):
        for name in ("lr0", "momentum", "tau_init", "alpha", "beta"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if self.lr0 <= 0 or self.tau_init <= 0:
            raise ConfigError("lr0 and tau_init must be positive")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ConfigError("epochs and batch_size must be positive")
        if 512 % self.num_groups != 0:
            raise ConfigError(f"num_groups={self.num_groups} does not divide 512")
        if self.attribute_weighting not in WEIGHTING_MODES:
            raise ConfigError(
                f"attribute_weighting must be one of {WEIGHTING_MODES}, "
                f"got {self.attribute_weighting!r}"
            )
        if self.encoder not in ("stub", "pretrained"):
            raise ConfigError(f"encoder must be 'stub' or 'pretrained', got {self.encoder!r}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must be in [0, 1), got {self.val_fraction}")

    def class_names(self, num_classes: int) -> list[str]:
        names = [self.class_name_benign, self.class_name_unsure, self.class_name_malignant]
        if num_classes == 2:
            return [self.class_name_benign, self.class_name_malignant]
        return names

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def canonical_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in sorted(self.as_dict().items()))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _parse_value(name: str, raw: str):
    default = getattr(TrainConfig(), name)
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"key {name!r}: cannot parse boolean from {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw.strip()


def parse_config_text(text: str) -> dict:
    """Parse `key = value` lines; '#' starts a comment, blank lines ignored."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        try:
            values[key] = _parse_value(key, raw)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: key {key!r}: {exc}") from exc
    return values


def load_config(path=None, overrides: dict | None = None) -> TrainConfig:
    """Config file first, then CLI overrides (last writer wins)."""
    values = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = value
    try:
        return TrainConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def with_loss_switches(config: TrainConfig, ic: bool, ia: bool, ca: bool) -> TrainConfig:
    return replace(config, loss_ic=ic, loss_ia=ia, loss_ca=ca)
