"""Pretraining loop, learning-rate schedule and checkpoints."""
from __future__ import annotations

import json
import logging
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from aasae.augment import AugmentationSpec
from aasae.data import ImageDataset
from aasae.model import (
    FIXED_LOG_SCALE_RANGE,
    DecoderConfig,
    EncoderConfig,
    StochasticAutoencoder,
    build_model,
)
from aasae.objective import ObjectiveConfig, objective_terms
from aasae.rng import RngState

log = logging.getLogger(__name__)

METRICS_SCHEMA_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1
DEFAULT_EVAL_EPOCHS = (400, 800, 1600, 3200)

# stream keys under the run seed
_INIT_KEY, _SHUFFLE_KEY, _EXAMPLE_KEY, _VAL_KEY = 1, 2, 3, 4


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class TrainingDiverged(RuntimeError):
    def __init__(self, snapshot: dict):
        self.snapshot = snapshot
        super().__init__(f"non-finite loss: {json.dumps(snapshot, sort_keys=True)}")


@dataclass
class TrainConfig:
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)
    base_lr: float = 2.5e-4
    base_batch_size: int = 256
    batch_size: int = 256
    warmup_epochs: int = 10
    max_epochs: int = 3200
    weight_decay: float = 0.0
    seed: int = 0
    logscale_mode: str = "learned"
    fixed_logscale: float | None = None
    eval_every_epochs: int = 1
    checkpoint_epochs: tuple[int, ...] = DEFAULT_EVAL_EPOCHS
    checkpoint_every_epochs: int | None = None
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        self.checkpoint_epochs = tuple(int(e) for e in self.checkpoint_epochs)
        self.adam_betas = tuple(float(b) for b in self.adam_betas)

    def validate(self) -> list[str]:
        errors = self.encoder.validate() + self.decoder.validate() + self.objective.validate() + self.augmentation.validate()
        for name in ("base_lr", "base_batch_size", "batch_size", "warmup_epochs", "max_epochs", "eval_every_epochs"):
            if not getattr(self, name) > 0:
                errors.append(f"{name}: must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0:
            errors.append(f"weight_decay: must be nonnegative, got {self.weight_decay}")
        if self.logscale_mode not in ("learned", "fixed"):
            errors.append(f"logscale_mode: must be 'learned' or 'fixed', got {self.logscale_mode!r}")
        elif self.logscale_mode == "fixed":
            lo, hi = FIXED_LOG_SCALE_RANGE
            if self.fixed_logscale is None:
                errors.append("fixed_logscale: required when logscale_mode is 'fixed'")
            elif not lo <= self.fixed_logscale <= hi:
                errors.append(f"fixed_logscale: {self.fixed_logscale} outside [{lo}, {hi}]")
        elif self.fixed_logscale is not None:
            errors.append("fixed_logscale: only allowed when logscale_mode is 'fixed'")
        if self.checkpoint_every_epochs is not None and self.checkpoint_every_epochs < 1:
            errors.append("checkpoint_every_epochs: must be positive when set")
        if self.encoder.in_channels != self.decoder.output_channels:
            errors.append("decoder.output_channels: must equal encoder.in_channels")
        view = self.augmentation.crop_output_size
        if self.objective.augmented_input and not self.augmentation.identity and view is not None:
            if tuple(view) != (self.encoder.input_size, self.encoder.input_size):
                errors.append(f"augmentation.crop_output_size {tuple(view)} must match encoder.input_size {self.encoder.input_size}")
        elif self.encoder.input_size != self.decoder.output_size:
            errors.append(f"encoder.input_size {self.encoder.input_size} must match decoder.output_size {self.decoder.output_size} when the encoder sees clean images")
        return errors

    def check(self) -> "TrainConfig":
        errors = self.validate()
        if errors:
            raise ConfigError(errors)
        return self

    def to_dict(self) -> dict:
        d = {
            "objective": self.objective.to_dict(),
            "encoder": asdict(self.encoder),
            "decoder": asdict(self.decoder),
            "augmentation": self.augmentation.to_dict(),
        }
        for k, v in asdict(self).items():
            if k in d or v is None:
                continue
            d[k] = list(v) if isinstance(v, tuple) else v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        errors = []
        parts = {}
        for key, typ in (("objective", ObjectiveConfig), ("encoder", EncoderConfig), ("decoder", DecoderConfig), ("augmentation", AugmentationSpec)):
            try:
                parts[key] = typ(**d.pop(key, {}))
            except TypeError as e:
                errors.append(f"{key}: {e}")
            except ValueError as e:
                errors.append(str(e))
        if errors:
            raise ConfigError(errors)
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([f"{k}: unknown field" for k in unknown])
        return cls(**parts, **d)


def scaled_hyperparams(config: TrainConfig) -> tuple[float, int]:
    """Linear scaling of learning rate and warmup length with minibatch size."""
    ratio = config.batch_size / config.base_batch_size
    lr = config.base_lr * ratio
    warmup = max(1, math.ceil(config.warmup_epochs * ratio))
    return lr, warmup


def lr_at_step(step: int, total_warmup_steps: int, effective_lr: float) -> float:
    """Linear warmup over ``total_warmup_steps`` (step 0 gets lr/total), constant afterwards."""
    if total_warmup_steps <= 0:
        raise ValueError(f"total_warmup_steps must be positive, got {total_warmup_steps}")
    if step < 0:
        raise ValueError(f"step must be nonnegative, got {step}")
    if step < total_warmup_steps:
        # lr * n / n can round one ulp above lr; clamp so the schedule stays monotone
        return min(effective_lr * (step + 1) / total_warmup_steps, effective_lr)
    return effective_lr


def lr_schedule_table(config: TrainConfig, steps_per_epoch: int) -> list[float]:
    lr, warmup_epochs = scaled_hyperparams(config)
    warmup_steps = warmup_epochs * steps_per_epoch
    return [lr_at_step(s, warmup_steps, lr) for s in range(config.max_epochs * steps_per_epoch)]


def model_from_config(config: TrainConfig) -> StochasticAutoencoder:
    torch.manual_seed(RngState(config.seed).derive(_INIT_KEY).stream_id % (1 << 63))
    s = config.fixed_logscale if config.logscale_mode == "fixed" else 0.0
    return build_model(config.encoder, config.decoder, config.logscale_mode, s)


def _atomic_write_bytes(path: Path, writer: Callable) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            writer(f)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path: Path, model: StochasticAutoencoder, config: TrainConfig, optimizer=None, step: int = 0, epoch: int = 0) -> Path:
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": config.to_dict(),
        "encoder": model.encoder.state_dict(),
        "decoder": model.decoder.state_dict(),
        "log_scale": model.log_scale.detach().clone(),
        "logscale_mode": model.logscale_mode,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "step": step,
        "epoch": epoch,
    }
    path = Path(path)
    _atomic_write_bytes(path, lambda f: torch.save(payload, f))
    return path


def load_checkpoint(path: Path) -> tuple[StochasticAutoencoder, TrainConfig, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"{path}: not a checkpoint of format version {CHECKPOINT_FORMAT_VERSION}")
    config = TrainConfig.from_dict(payload["config"])
    model = build_model(config.encoder, config.decoder, payload["logscale_mode"], float(payload["log_scale"]))
    model.encoder.load_state_dict(payload["encoder"])
    model.decoder.load_state_dict(payload["decoder"])
    with torch.no_grad():
        model.log_scale.copy_(payload["log_scale"])
    model.eval()
    return model, config, payload


@dataclass
class TrainResult:
    model: StochasticAutoencoder
    metrics: list[dict]
    checkpoints: list[Path]
    optimizer: torch.optim.Optimizer | None = None


def _batches(n: int, batch_size: int, perm: np.ndarray):
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def _stream_list(root: RngState, key: int, epoch: int, idx) -> list[RngState]:
    return [root.derive(key, epoch, int(i)) for i in idx]


@torch.no_grad()
def evaluate_objective(model: StochasticAutoencoder, config: TrainConfig, dataset: ImageDataset, batch_size: int = 500) -> dict:
    """Objective terms on ``dataset`` with streams that stay fixed across epochs."""
    was_training = model.training
    model.eval()
    root = RngState(config.seed)
    totals = {"loss": 0.0, "recon_nll": 0.0, "kl": 0.0}
    n = len(dataset)
    for idx in _batches(n, batch_size, np.arange(n)):
        terms = objective_terms(model, dataset.batch(idx), config.objective, config.augmentation, _stream_list(root, _VAL_KEY, 0, idx))
        k = len(idx)
        totals["loss"] += terms.loss.item() * k
        totals["recon_nll"] += terms.recon_nll.item() * k
        totals["kl"] += terms.kl.item() * k
    model.train(was_training)
    return {k: v / n for k, v in totals.items()}


def checkpoint_epochs(config: TrainConfig) -> list[int]:
    epochs = {e for e in config.checkpoint_epochs if e <= config.max_epochs}
    if config.checkpoint_every_epochs:
        epochs.update(range(config.checkpoint_every_epochs, config.max_epochs + 1, config.checkpoint_every_epochs))
    epochs.add(config.max_epochs)
    return sorted(epochs)


def pretrain(
    config: TrainConfig,
    dataset: ImageDataset,
    out_dir: Path | None = None,
    val_dataset: ImageDataset | None = None,
    epoch_callback: Callable[[StochasticAutoencoder, int], dict | None] | None = None,
) -> TrainResult:
    """Train the autoencoder on ``dataset`` for ``config.max_epochs``.

    Writes ``metrics.jsonl`` (one row per epoch) and checkpoints to ``out_dir``
    when given. ``epoch_callback(model, epoch)`` may return extra metric fields
    (e.g. a probe accuracy); it runs after the epoch's optimizer steps.
    """
    config.check()
    if len(dataset) == 0:
        raise ValueError("cannot pretrain on an empty dataset")
    expected = (config.decoder.output_channels, config.decoder.output_size, config.decoder.output_size)
    if dataset.image_shape != expected:
        raise ValueError(f"dataset images have shape {dataset.image_shape}, decoder produces {expected}")

    model = model_from_config(config)
    model.train()
    lr, warmup_epochs = scaled_hyperparams(config)
    n = len(dataset)
    steps_per_epoch = math.ceil(n / config.batch_size)
    warmup_steps = warmup_epochs * steps_per_epoch
    optimizer = torch.optim.Adam(
        model.parameters(), lr=lr_at_step(0, warmup_steps, lr), betas=config.adam_betas, eps=config.adam_eps, weight_decay=config.weight_decay
    )
    root = RngState(config.seed)
    ckpt_at = set(checkpoint_epochs(config))
    metrics_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.jsonl"
        metrics_path.write_text("")

    metrics, checkpoints = [], []
    step = 0
    for epoch in range(1, config.max_epochs + 1):
        perm = root.derive(_SHUFFLE_KEY, epoch).generator().permutation(n)
        sums = {"loss": 0.0, "recon_nll": 0.0, "kl": 0.0}
        for b, idx in enumerate(_batches(n, config.batch_size, perm)):
            current_lr = lr_at_step(step, warmup_steps, lr)
            for group in optimizer.param_groups:
                group["lr"] = current_lr
            terms = objective_terms(model, dataset.batch(idx), config.objective, config.augmentation, _stream_list(root, _EXAMPLE_KEY, epoch, idx))
            if not torch.isfinite(terms.loss):
                raise TrainingDiverged({
                    "epoch": epoch,
                    "batch_index": b,
                    "step": step,
                    "lr": current_lr,
                    "loss": terms.loss.item(),
                    "recon_nll": terms.recon_nll.item(),
                    "kl": terms.kl.item(),
                })
            optimizer.zero_grad(set_to_none=True)
            terms.loss.backward()
            optimizer.step()
            k = len(idx)
            sums["loss"] += terms.loss.item() * k
            sums["recon_nll"] += terms.recon_nll.item() * k
            sums["kl"] += terms.kl.item() * k
            step += 1

        row = {
            "schema_version": METRICS_SCHEMA_VERSION,
            "epoch": epoch,
            "step": step,
            "lr": current_lr,
            "train_loss": sums["loss"] / n,
            "recon_nll": sums["recon_nll"] / n,
            "kl": sums["kl"] / n,
            "log_scale": float(model.current_log_scale().item()),
        }
        if val_dataset is not None and (epoch % config.eval_every_epochs == 0 or epoch == config.max_epochs):
            val = evaluate_objective(model, config, val_dataset)
            row.update({"val_loss": val["loss"], "val_recon_nll": val["recon_nll"], "val_kl": val["kl"]})
        if epoch_callback is not None:
            extra = epoch_callback(model, epoch)
            if extra:
                row.update(extra)
            model.train()
        metrics.append(row)
        log.info("epoch %d loss %.4f log_scale %.3f", epoch, row["train_loss"], row["log_scale"])
        if metrics_path is not None:
            with open(metrics_path, "a") as f:
                f.write(json.dumps(row, sort_keys=True) + "\n")
        if out_dir is not None and epoch in ckpt_at:
            checkpoints.append(save_checkpoint(out_dir / f"checkpoint_epoch{epoch:05d}.pt", model, config, optimizer, step, epoch))

    model.eval()
    return TrainResult(model, metrics, checkpoints, optimizer)
