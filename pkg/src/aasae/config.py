"""Experiment configuration files (TOML, schema-versioned)."""
from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from aasae.data import DatasetDescriptor
from aasae.evalsuite import ProbeConfig
from aasae.trainer import ConfigError, TrainConfig

SCHEMA_VERSION = 1


@dataclass
class AlignmentConfig:
    examples: int = 8
    views: int = 8

    def validate(self) -> list[str]:
        errors = []
        if self.examples < 2:
            errors.append(f"alignment.examples: need at least 2, got {self.examples}")
        if self.views < 2:
            errors.append(f"alignment.views: need at least 2, got {self.views}")
        return errors


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: DatasetDescriptor = field(default_factory=DatasetDescriptor)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    output_dir: str = "runs"
    schema_version: int = SCHEMA_VERSION

    def validate(self) -> list[str]:
        errors = [e if e.startswith("train.") else f"train.{e}" for e in self.train.validate()]
        errors += self.dataset.validate() + self.probe.validate() + self.alignment.validate()
        if self.schema_version != SCHEMA_VERSION:
            errors.append(f"schema_version: expected {SCHEMA_VERSION}, got {self.schema_version}")
        return errors

    def check(self) -> "ExperimentConfig":
        errors = self.validate()
        if errors:
            raise ConfigError(errors)
        return self

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "output_dir": self.output_dir,
            "train": self.train.to_dict(),
            "dataset": self.dataset.to_dict(),
            "probe": self.probe.to_dict(),
            "alignment": asdict(self.alignment),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        errors = []
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError([f"schema_version: expected {SCHEMA_VERSION}, got {version}"])
        parts = {}
        try:
            parts["train"] = TrainConfig.from_dict(d.pop("train", {}))
        except ConfigError as e:
            errors.extend(f"train.{m}" if not m.startswith("train.") else m for m in e.errors)
        except (TypeError, ValueError) as e:
            errors.append(f"train: {e}")
        for key, typ in (("dataset", DatasetDescriptor), ("probe", ProbeConfig), ("alignment", AlignmentConfig)):
            try:
                parts[key] = typ(**d.pop(key, {}))
            except TypeError as e:
                errors.append(f"{key}: {e}")
        output_dir = d.pop("output_dir", "runs")
        for k in sorted(d):
            errors.append(f"{k}: unknown field")
        if errors:
            raise ConfigError(errors)
        return cls(output_dir=output_dir, schema_version=version, **parts)


def loads(text: str) -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError([f"config: not valid TOML ({e})"]) from e
    return ExperimentConfig.from_dict(raw)


def dumps(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())


def load(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError([f"config: file not found: {path}"])
    return loads(path.read_text())


def save(cfg: ExperimentConfig, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(dumps(cfg))
    return path


def _parse_scalar(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(cfg: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Apply ``dotted.key=value`` overrides (values parsed as TOML scalars)."""
    d = cfg.to_dict()
    errors = []
    for item in overrides:
        if "=" not in item:
            errors.append(f"--set {item!r}: expected key=value")
            continue
        key, value = item.split("=", 1)
        node = d
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                errors.append(f"{key}: {p} is not a section")
                break
        else:
            node[parts[-1]] = _parse_scalar(value.strip())
    if errors:
        raise ConfigError(errors)
    return ExperimentConfig.from_dict(d)


def desk_scale(variant: str = "AASAE", seed: int = 0) -> ExperimentConfig:
    """Small synthetic setup that trains in minutes on one CPU core."""
    from aasae.augment import AugmentationSpec
    from aasae.model import DecoderConfig, EncoderConfig
    from aasae.objective import ObjectiveConfig

    size = 16
    train = TrainConfig(
        objective=ObjectiveConfig(variant),
        encoder=EncoderConfig(backbone="tiny-conv", latent_dim=128, projection_hidden_dim=512, input_size=size, width=16),
        decoder=DecoderConfig(architecture="tiny-conv", output_size=size, width=16),
        augmentation=AugmentationSpec(crop_output_size=(size, size)),
        base_lr=1e-3,
        batch_size=256,
        warmup_epochs=5,
        max_epochs=60,
        seed=seed,
    )
    dataset = DatasetDescriptor(name="synthetic", num_examples=5000, num_classes=10, image_size=size, seed=0)
    return ExperimentConfig(train=train, dataset=dataset, probe=ProbeConfig(epochs=90))
