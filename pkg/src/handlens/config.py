"""Run configuration: one flat, versioned key = value surface.

Every knob the underlying method leaves open (epochs, batch size, decay,
augmentation magnitudes, ...) has an explicit recorded value here, and the
full merged configuration is embedded verbatim into every output artifact,
so any artifact can be reproduced from its own header. CLI flags override
file values; the merge result is what gets recorded.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .data import AugmentationPolicy
from .nn import build_model
from .train import TrainSettings

CONFIG_VERSION = 1

__all__ = ["RunConfig", "CONFIG_VERSION", "config_from_file", "apply_overrides"]


@dataclass(frozen=True)
class RunConfig:
    config_version: int = CONFIG_VERSION
    # model
    arch: str = "densenet121"
    head: str = "concat_pool"
    num_classes: int = 7
    head_drop1: float = 0.25
    head_drop2: float = 0.5
    # optimizer
    optimizer: str = "adamw"
    weight_decay: float = 1e-2
    beta2: float = 0.999
    eps: float = 1e-8
    # schedule
    lr_max: float = 1e-2
    div_factor: float = 25.0
    momentum_high: float = 0.95
    momentum_low: float = 0.85
    one_cycle: bool = True
    # training loop
    epochs: int = 30
    batch_size: int = 16
    k: int = 5
    seed: int = 0
    stratified: bool = False
    # data
    dataset_root: str = ""
    out_dir: str = "runs"
    resize_to: int = 256
    crop_size: int = 224
    # augmentation
    aug_p_hflip: float = 0.5
    aug_p_vflip: float = 0.5
    aug_p_rotate: float = 0.75
    aug_max_rotation: float = 10.0
    aug_p_zoom: float = 0.75
    aug_max_zoom: float = 1.1
    aug_p_lighting: float = 0.75
    aug_max_lighting: float = 0.2
    aug_p_contrast: float = 0.75
    aug_max_contrast: float = 0.2
    aug_p_warp: float = 0.75
    aug_max_warp: float = 0.2
    # lr range test
    lr_find_min: float = 1e-7
    lr_find_max: float = 10.0
    lr_find_steps: int = 100
    lr_find_smoothing: float = 0.98
    lr_find_divergence: float = 4.0

    def augmentation_policy(self) -> AugmentationPolicy:
        return AugmentationPolicy(
            p_hflip=self.aug_p_hflip, p_vflip=self.aug_p_vflip,
            p_rotate=self.aug_p_rotate, max_rotation=self.aug_max_rotation,
            p_zoom=self.aug_p_zoom, max_zoom=self.aug_max_zoom,
            p_lighting=self.aug_p_lighting, max_lighting=self.aug_max_lighting,
            p_contrast=self.aug_p_contrast, max_contrast=self.aug_max_contrast,
            p_warp=self.aug_p_warp, max_warp=self.aug_max_warp)

    def train_settings(self) -> TrainSettings:
        return TrainSettings(
            epochs=self.epochs, batch_size=self.batch_size, lr_max=self.lr_max,
            div_factor=self.div_factor, momentum_high=self.momentum_high,
            momentum_low=self.momentum_low, optimizer=self.optimizer,
            weight_decay=self.weight_decay, beta2=self.beta2, eps=self.eps,
            schedule="one_cycle" if self.one_cycle else "constant",
            seed=self.seed, resize_to=self.resize_to, crop_size=self.crop_size,
            augmentation=self.augmentation_policy())

    def model_builder(self):
        return lambda seed: build_model(
            self.arch, self.num_classes, head=self.head, seed=seed,
            head_dropout=(self.head_drop1, self.head_drop2))

    # -- serialization --------------------------------------------------

    def to_lines(self) -> list[str]:
        """Flat `key = value` lines; config_version first, rest sorted."""
        rows = {f.name: getattr(self, f.name) for f in fields(self)}
        version = rows.pop("config_version")
        lines = [f"config_version = {version}"]
        for key in sorted(rows):
            lines.append(f"{key} = {_format_value(rows[key])}")
        return lines

    def to_text(self) -> str:
        return "\n".join(self.to_lines()) + "\n"

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


_FIELD_TYPES = {f.name: type(f.default) for f in fields(RunConfig)}


def _parse_value(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    if kind is bool:
        if raw.lower() in ("true", "on", "1", "yes"):
            return True
        if raw.lower() in ("false", "off", "0", "no"):
            return False
        raise ValueError(f"config key {key}: expected a boolean, got {raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return raw


def config_from_file(path) -> RunConfig:
    """Parse a flat key = value file; unknown keys and newer versions fail."""
    values: dict = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _parse_value(key, raw)
    version = values.get("config_version", CONFIG_VERSION)
    if version > CONFIG_VERSION:
        raise ValueError(f"{path}: config version {version} is newer than "
                         f"supported version {CONFIG_VERSION}")
    return RunConfig(**values)


def apply_overrides(config: RunConfig, overrides: dict) -> RunConfig:
    """New config with the given (already typed) field overrides applied."""
    unknown = set(overrides) - set(_FIELD_TYPES)
    if unknown:
        raise ValueError(f"unknown config fields: {sorted(unknown)}")
    return replace(config, **overrides)
