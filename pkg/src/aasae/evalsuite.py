"""Representation diagnostics: linear probe, view-alignment matrices, ablation sweeps."""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from aasae.augment import AugmentationSpec, augment_batch
from aasae.data import ImageDataset
from aasae.model import StochasticAutoencoder, param_checksum
from aasae.rng import RngState
from aasae.trainer import TrainConfig, pretrain

log = logging.getLogger(__name__)

ABLATION_AXES = ("batch_size", "latent_dim", "decoder_arch", "logscale")
ABLATION_COLUMNS = ("axis", "value", "probe_accuracy", "epochs", "seed", "status")
DEFAULT_SWEEPS = {
    "batch_size": [128, 256, 512, 1024],
    "latent_dim": [64, 128, 256, 512],
    "decoder_arch": ["resnet18", "resnet34", "resnet50"],
}
FEATURE_SOURCES = ("backbone", "projection")


class EvalError(ValueError):
    pass


@dataclass
class ProbeConfig:
    epochs: int = 90
    batch_size: int = 256
    feature_source: str = "backbone"
    momentum: float = 0.9
    standardize: bool = True
    train_augmentation: bool = False
    num_classes: int | None = None
    seed: int = 0

    @property
    def lr(self) -> float:
        return 0.1 * self.batch_size / 256

    def validate(self) -> list[str]:
        errors = []
        if self.epochs < 1:
            errors.append(f"probe.epochs: must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            errors.append(f"probe.batch_size: must be >= 1, got {self.batch_size}")
        if self.feature_source not in FEATURE_SOURCES:
            errors.append(f"probe.feature_source: must be one of {FEATURE_SOURCES}, got {self.feature_source!r}")
        return errors

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass
class ProbeResult:
    accuracy: float
    train_accuracy: float
    lr: float
    encoder_checksum: str


@dataclass
class AlignmentReport:
    similarity_matrix: np.ndarray
    intra_mean: float
    inter_mean: float
    alignment_gap: float
    collapse_score: float
    num_examples: int
    views_per_example: int
    zero_norm_vectors: list[int] = field(default_factory=list)

    def to_dict(self, include_matrix: bool = True) -> dict:
        d = {
            "intra_mean": self.intra_mean,
            "inter_mean": self.inter_mean,
            "alignment_gap": self.alignment_gap,
            "collapse_score": self.collapse_score,
            "num_examples": self.num_examples,
            "views_per_example": self.views_per_example,
            "zero_norm_vectors": list(self.zero_norm_vectors),
        }
        if include_matrix:
            d["similarity_matrix"] = self.similarity_matrix.tolist()
        return d


@dataclass
class EvalReport:
    probe_accuracy: float
    accuracy_curve: list[tuple[int, float]] = field(default_factory=list)
    alignment: AlignmentReport | None = None
    config_fingerprint: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "probe_accuracy": self.probe_accuracy,
            "accuracy_curve": [[int(e), float(a)] for e, a in self.accuracy_curve],
            "alignment": None if self.alignment is None else self.alignment.to_dict(),
            "config_fingerprint": self.config_fingerprint,
            **self.extra,
        }

    def save(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path


def config_fingerprint(cfg) -> str:
    d = cfg.to_dict() if hasattr(cfg, "to_dict") else cfg
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


# --- features and probe ----------------------------------------------------


@torch.no_grad()
def extract_features(model: StochasticAutoencoder, images: torch.Tensor | ImageDataset, source: str = "backbone", batch_size: int = 500) -> torch.Tensor:
    if source not in FEATURE_SOURCES:
        raise EvalError(f"unknown feature source {source!r}")
    was_training = model.training
    model.eval()
    n = len(images)
    out = []
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(n, start + batch_size))
        x = images.batch(idx) if isinstance(images, ImageDataset) else images[idx]
        out.append(model.encoder.features(x) if source == "backbone" else model.encode(x).mu)
    model.train(was_training)
    return torch.cat(out)


def train_linear_classifier(
    train_x: torch.Tensor,
    train_y: torch.Tensor,
    cfg: ProbeConfig,
    feature_fn: Callable[[int], torch.Tensor] | None = None,
) -> nn.Linear:
    """SGD with Nesterov momentum at constant lr ``0.1 * batch_size / 256``.

    ``feature_fn(epoch)`` replaces ``train_x`` per epoch when the probe trains
    on freshly augmented features.
    """
    num_classes = cfg.num_classes or int(train_y.max()) + 1
    gen = torch.Generator().manual_seed(cfg.seed)
    clf = nn.Linear(train_x.shape[1], num_classes)
    with torch.no_grad():
        bound = 1.0 / math.sqrt(train_x.shape[1])
        clf.weight.uniform_(-bound, bound, generator=gen)
        clf.bias.zero_()
    opt = torch.optim.SGD(clf.parameters(), lr=cfg.lr, momentum=cfg.momentum, nesterov=True)
    n = train_x.shape[0]
    for epoch in range(cfg.epochs):
        x = feature_fn(epoch) if feature_fn is not None else train_x
        perm = torch.randperm(n, generator=gen)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            loss = F.cross_entropy(clf(x[idx]), train_y[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    return clf


def _check_labels(labels: torch.Tensor, num_classes: int | None, where: str) -> None:
    if labels is None:
        raise EvalError(f"{where}: the linear probe needs labeled data")
    if num_classes is not None and (int(labels.max()) >= num_classes or int(labels.min()) < 0):
        raise EvalError(f"{where}: labels span [{int(labels.min())}, {int(labels.max())}] but the classifier has {num_classes} outputs")


def probe_features(train_x, train_y, test_x, test_y, cfg: ProbeConfig, feature_fn=None) -> tuple[float, float]:
    """Fit a linear classifier on fixed features; return (test accuracy, train accuracy)."""
    errors = cfg.validate()
    if errors:
        raise EvalError("; ".join(errors))
    _check_labels(train_y, None, "probe-train")
    _check_labels(test_y, None, "probe-test")
    num_classes = cfg.num_classes or int(max(train_y.max(), test_y.max())) + 1
    _check_labels(train_y, num_classes, "probe-train")
    _check_labels(test_y, num_classes, "probe-test")
    cfg = replace(cfg, num_classes=num_classes)
    train_x, test_x = train_x.float(), test_x.float()
    if cfg.standardize:
        mean, std = train_x.mean(0, keepdim=True), train_x.std(0, keepdim=True).clamp_min(1e-6)
        norm = lambda t: (t - mean) / std  # noqa: E731
        train_x, test_x = norm(train_x), norm(test_x)
        if feature_fn is not None:
            raw_fn = feature_fn
            feature_fn = lambda e: norm(raw_fn(e))  # noqa: E731
    clf = train_linear_classifier(train_x, train_y, cfg, feature_fn)
    with torch.no_grad():
        test_acc = (clf(test_x).argmax(1) == test_y).float().mean().item()
        train_acc = (clf(train_x).argmax(1) == train_y).float().mean().item()
    return test_acc, train_acc


_PROBE_AUG = AugmentationSpec(crop_scale_range=(0.08, 1.0), flip_prob=0.5, jitter_prob=0.0, grayscale_prob=0.0)


def linear_probe(model: StochasticAutoencoder, train: ImageDataset, test: ImageDataset, cfg: ProbeConfig | None = None) -> ProbeResult:
    """Train a linear classifier on frozen encoder features; the encoder is never updated."""
    cfg = cfg or ProbeConfig()
    before = param_checksum(model)
    train_x = extract_features(model, train, cfg.feature_source)
    test_x = extract_features(model, test, cfg.feature_source)
    feature_fn = None
    if cfg.train_augmentation:
        h = train.image_shape[-1]
        spec = copy.deepcopy(_PROBE_AUG)
        spec.crop_output_size = (h, h)
        root = RngState(cfg.seed).derive(7)

        def feature_fn(epoch):
            views = augment_batch(train.batch(np.arange(len(train))), spec, [root.derive(epoch, i) for i in range(len(train))])
            return extract_features(model, views, cfg.feature_source)

    acc, train_acc = probe_features(train_x, train.labels, test_x, test.labels, cfg, feature_fn)
    after = param_checksum(model)
    if before != after:
        raise RuntimeError("encoder weights changed during linear probing")
    return ProbeResult(acc, train_acc, cfg.lr, after)


# --- alignment ---------------------------------------------------------------


def cosine_similarity_matrix(vectors: torch.Tensor) -> tuple[np.ndarray, list[int]]:
    v = vectors.detach().double()
    norms = v.norm(dim=1)
    zero = [int(i) for i in torch.nonzero(norms <= 1e-12).flatten()]
    unit = v / norms.clamp_min(1e-12).unsqueeze(1)
    sim = unit @ unit.T
    sim = 0.5 * (sim + sim.T)
    sim = sim.clamp(-1.0, 1.0)
    sim.fill_diagonal_(1.0)
    return sim.numpy(), zero


def summarize_similarity(sim: np.ndarray, owner: np.ndarray, exclude: Sequence[int] = ()) -> tuple[float, float, float]:
    """(intra_mean, inter_mean, collapse_score) over off-diagonal pairs, skipping excluded rows."""
    n = sim.shape[0]
    valid = np.ones(n, dtype=bool)
    valid[list(exclude)] = False
    pair_ok = valid[:, None] & valid[None, :] & ~np.eye(n, dtype=bool)
    same = owner[:, None] == owner[None, :]
    intra = sim[pair_ok & same]
    inter = sim[pair_ok & ~same]
    off = sim[pair_ok]
    mean = lambda a: float(a.mean()) if a.size else float("nan")  # noqa: E731
    return mean(intra), mean(inter), mean(off)


def alignment_report(
    encoder: StochasticAutoencoder | Callable[[torch.Tensor], torch.Tensor],
    examples: torch.Tensor,
    spec: AugmentationSpec,
    views: int = 8,
    rng: RngState | None = None,
) -> AlignmentReport:
    """Cosine similarities between representations of augmented views.

    View ``v`` of example ``m`` is drawn from ``rng.derive(m, v)``; the
    representation is the posterior mean.
    """
    m = examples.shape[0]
    if m < 2 or views < 2:
        raise EvalError(f"alignment needs at least 2 examples and 2 views, got M={m}, V={views}")
    rng = rng or RngState(0)
    batch = examples.repeat_interleave(views, dim=0)
    streams = [rng.derive(i, v) for i in range(m) for v in range(views)]
    x = augment_batch(batch, spec, streams)
    with torch.no_grad():
        if isinstance(encoder, StochasticAutoencoder):
            was_training = encoder.training
            encoder.eval()
            reps = encoder.encode(x).mu
            encoder.train(was_training)
        else:
            reps = encoder(x)
    sim, zero = cosine_similarity_matrix(reps.reshape(reps.shape[0], -1))
    owner = np.repeat(np.arange(m), views)
    intra, inter, collapse = summarize_similarity(sim, owner, zero)
    return AlignmentReport(sim, intra, inter, intra - inter, collapse, m, views, zero)


# --- ablation ----------------------------------------------------------------


def default_sweep(axis: str, n_logscales: int = 4, seed: int = 0) -> list:
    if axis == "logscale":
        return [round(float(s), 4) for s in np.random.default_rng(seed).uniform(-5.0, 2.0, size=n_logscales)]
    return list(DEFAULT_SWEEPS[axis])


def apply_axis(base: TrainConfig, axis: str, value) -> TrainConfig:
    cfg = TrainConfig.from_dict(base.to_dict())
    if axis == "batch_size":
        cfg.batch_size = int(value)
    elif axis == "latent_dim":
        cfg.encoder.latent_dim = int(value)
    elif axis == "decoder_arch":
        cfg.decoder.architecture = str(value)
    elif axis == "logscale":
        cfg.logscale_mode = "fixed"
        cfg.fixed_logscale = float(value)
    else:
        raise EvalError(f"unknown ablation axis {axis!r}, expected one of {ABLATION_AXES}")
    return cfg


def pretrain_and_probe(cfg: TrainConfig, pretrain_ds: ImageDataset, probe_train: ImageDataset, probe_test: ImageDataset, probe_cfg: ProbeConfig, out_dir: Path | None = None) -> float:
    result = pretrain(cfg, pretrain_ds, out_dir)
    return linear_probe(result.model, probe_train, probe_test, probe_cfg).accuracy


def run_ablation(
    base: TrainConfig,
    axis: str,
    values: Sequence,
    pretrain_ds: ImageDataset,
    probe_train: ImageDataset,
    probe_test: ImageDataset,
    probe_cfg: ProbeConfig | None = None,
    out_dir: Path | None = None,
    seeds: Sequence[int] | None = None,
) -> list[dict]:
    """Vary one hyperparameter, pretrain + probe for each value; failed runs are recorded, not raised."""
    if axis not in ABLATION_AXES:
        raise EvalError(f"unknown ablation axis {axis!r}, expected one of {ABLATION_AXES}")
    if not values:
        raise EvalError("ablation needs at least one value")
    probe_cfg = probe_cfg or ProbeConfig()
    seeds = list(seeds) if seeds is not None else [base.seed]
    rows = []
    for value in values:
        for seed in seeds:
            row = {"axis": axis, "value": value, "probe_accuracy": None, "epochs": base.max_epochs, "seed": seed, "status": "ok"}
            try:
                cfg = apply_axis(base, axis, value)
                cfg.seed = seed
                run_dir = Path(out_dir) / f"{axis}={value}" / f"seed{seed}" if out_dir is not None else None
                row["probe_accuracy"] = pretrain_and_probe(cfg, pretrain_ds, probe_train, probe_test, probe_cfg, run_dir)
            except Exception as e:  # noqa: BLE001 - a failed run must not stop the sweep
                log.warning("ablation %s=%s seed %s failed: %s", axis, value, seed, e)
                row["status"] = f"failed: {type(e).__name__}: {e}"
            rows.append(row)
    if out_dir is not None:
        write_ablation_csv(rows, Path(out_dir) / "ablation.csv")
        plot_ablation(rows, Path(out_dir) / "ablation.png")
    return rows


def write_ablation_csv(rows: list[dict], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=ABLATION_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in ABLATION_COLUMNS})
    return path


def read_ablation_csv(path: Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def plot_ablation(rows: list[dict], path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    values = list(dict.fromkeys(str(r["value"]) for r in rows))
    means, errs = [], []
    for v in values:
        accs = [100 * r["probe_accuracy"] for r in rows if str(r["value"]) == v and r["probe_accuracy"] is not None]
        means.append(np.mean(accs) if accs else 0.0)
        errs.append(np.std(accs) if len(accs) > 1 else 0.0)
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.bar(range(len(values)), means, yerr=errs, color="tab:blue", capsize=3)
    ax.set_xticks(range(len(values)), values)
    ax.set_xlabel(rows[0]["axis"] if rows else "")
    ax.set_ylabel("linear probe accuracy (%)")
    ax.set_ylim(0, 100)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def accuracy_spread(rows: list[dict]) -> float:
    """Max minus min of seed-averaged accuracy across values (fraction)."""
    by_value: dict[str, list[float]] = {}
    for r in rows:
        if r["probe_accuracy"] is not None:
            by_value.setdefault(str(r["value"]), []).append(float(r["probe_accuracy"]))
    means = [np.mean(v) for v in by_value.values()]
    return float(max(means) - min(means)) if means else float("nan")
