"""Dataset ingestion: CIFAR-10, STL-10, an image folder, and a synthetic shapes set.

Images are held as uint8 (N, c, h, w) and converted to float in [0, 1] per
batch. Every split assignment is seeded, so iteration order and membership
are reproducible.
"""
from __future__ import annotations

import hashlib
import os
import pickle
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

DATASETS = ("cifar10", "stl10-labeled-subset", "synthetic", "image-folder")
SPLITS = ("pretrain", "val", "probe-train", "probe-test")
DATA_ROOT_ENV = "AASAE_DATA_ROOT"

CIFAR10_FOLDER = "cifar-10-batches-py"
CIFAR10_FILES = {
    "data_batch_1": "c99cafc152244af753f735de768cd75f",
    "data_batch_2": "d4bba439e000b95fd0a9bffe97cbabec",
    "data_batch_3": "54ebc095f3ab1f0389bbae665268c751",
    "data_batch_4": "634d18415352ddfa80567beed471001a",
    "data_batch_5": "482c414d41f54cd18b22e5b47cb7c3cb",
    "test_batch": "40351d587109b95175f43aff81a1287e",
}
CIFAR10_VAL_SIZE = 5000

STL10_FOLDER = "stl10_binary"
STL10_FILES = {
    "train_X.bin": "918c2871b30a85fa023e0c44e0bee87f",
    "train_y.bin": "5a34089d4802c674881badbb80307741",
    "unlabeled_X.bin": "5242ba1fed5e4be9e1e742405eb56ca4",
    "test_X.bin": "7f263ba9f9e0b06b93213547f721ac82",
    "test_y.bin": "36f9794fa4beb8a2c72628de14fa638e",
}
STL10_PROBE_VAL_SIZE = 500
STL10_UNLABELED_VAL_SIZE = 5000

RADIUS_RANGE = (0.33, 0.48)  # shape radius as a fraction of the image side; large shapes dominate pixel variance
SHAPES = ("disk", "square", "triangle-up", "triangle-down", "plus", "cross", "ring", "diamond", "bars", "frame")


class DatasetError(RuntimeError):
    pass


@dataclass
class DatasetDescriptor:
    name: str = "synthetic"
    root: str | None = None
    split: str = "pretrain"
    subset_fraction: float = 1.0
    seed: int = 0
    # synthetic / image-folder only
    num_examples: int = 5000
    num_classes: int = 10
    image_size: int = 32
    verify_checksums: bool = True

    def validate(self) -> list[str]:
        errors = []
        if self.name not in DATASETS:
            errors.append(f"dataset.name: unknown dataset {self.name!r}, expected one of {DATASETS}")
        if self.split not in SPLITS:
            errors.append(f"dataset.split: unknown split {self.split!r}, expected one of {SPLITS}")
        if not 0.0 < self.subset_fraction <= 1.0:
            errors.append(f"dataset.subset_fraction: must be in (0, 1], got {self.subset_fraction}")
        if self.name == "synthetic" and not 1 <= self.num_classes <= len(SHAPES):
            errors.append(f"dataset.num_classes: synthetic data supports 1..{len(SHAPES)} classes")
        if self.num_examples < 1 or self.image_size < 4:
            errors.append("dataset.num_examples / image_size: must be positive (image_size >= 4)")
        return errors

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    def with_split(self, split: str) -> "DatasetDescriptor":
        return DatasetDescriptor(**{**asdict(self), "split": split})


@dataclass
class ImageDataset:
    images: torch.Tensor  # uint8 (N, c, h, w)
    labels: torch.Tensor | None  # int64 (N,)
    name: str = ""

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels is not None and len(self.labels) else 0

    def batch(self, idx) -> torch.Tensor:
        return self.images[idx].float().div_(255.0)

    def subset(self, idx) -> "ImageDataset":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return ImageDataset(self.images[idx], None if self.labels is None else self.labels[idx], self.name)

    def content_hash(self) -> str:
        h = hashlib.sha256(self.images.numpy().tobytes())
        if self.labels is not None:
            h.update(self.labels.numpy().tobytes())
        return h.hexdigest()


def _md5(path: Path) -> str:
    h = hashlib.md5()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _check_files(folder: Path, files: dict[str, str], verify: bool, fmt: str) -> None:
    for fname, digest in files.items():
        path = folder / fname
        if not path.is_file():
            raise DatasetError(f"missing {path}; expected {fmt}")
        if verify and _md5(path) != digest:
            raise DatasetError(f"checksum mismatch for {path} (expected md5 {digest}); file is corrupt or not {fmt}")


def stratified_split(labels: np.ndarray, holdout_per_class: dict[int, int] | int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Return (keep, holdout) index arrays; holdout draws a fixed count from every class."""
    rng = np.random.default_rng(seed)
    keep, hold = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        k = holdout_per_class if isinstance(holdout_per_class, int) else holdout_per_class[int(c)]
        hold.append(idx[:k])
        keep.append(idx[k:])
    return np.sort(np.concatenate(keep)), np.sort(np.concatenate(hold))


def stratified_subset(labels: np.ndarray | None, fraction: float, seed: int) -> np.ndarray:
    n = len(labels) if labels is not None else 0
    if fraction >= 1.0:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    if labels is None:
        raise DatasetError("stratified subsetting needs labels")
    out = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        take = int(round(fraction * len(idx)))
        out.append(np.sort(idx[rng.permutation(len(idx))[:take]]))
    return np.sort(np.concatenate(out))


# --- CIFAR-10 ---------------------------------------------------------------


def _read_cifar_batch(path: Path) -> tuple[np.ndarray, np.ndarray]:
    try:
        with open(path, "rb") as f:
            entry = pickle.load(f, encoding="latin1")
        data = np.asarray(entry["data"], dtype=np.uint8).reshape(-1, 3, 32, 32)
        labels = np.asarray(entry.get("labels", entry.get("fine_labels")), dtype=np.int64)
    except Exception as e:  # noqa: BLE001 - any decode failure means a corrupt file
        raise DatasetError(f"cannot decode {path}: expected a CIFAR-10 python pickle batch with 'data' and 'labels' ({e})") from e
    if len(data) != len(labels):
        raise DatasetError(f"{path}: {len(data)} images but {len(labels)} labels")
    return data, labels


def load_cifar10(root: Path, split: str, seed: int = 0, verify: bool = True) -> ImageDataset:
    folder = root / CIFAR10_FOLDER if (root / CIFAR10_FOLDER).is_dir() else root
    fmt = f"the CIFAR-10 python version ({CIFAR10_FOLDER}/data_batch_1..5, test_batch)"
    _check_files(folder, CIFAR10_FILES, verify, fmt)
    if split == "probe-test":
        x, y = _read_cifar_batch(folder / "test_batch")
        return ImageDataset(torch.from_numpy(x), torch.from_numpy(y), "cifar10/probe-test")
    parts = [_read_cifar_batch(folder / f"data_batch_{i}") for i in range(1, 6)]
    x = np.concatenate([p[0] for p in parts])
    y = np.concatenate([p[1] for p in parts])
    n_cls = int(y.max()) + 1
    train_idx, val_idx = stratified_split(y, CIFAR10_VAL_SIZE // n_cls, seed)
    idx = val_idx if split == "val" else train_idx
    return ImageDataset(torch.from_numpy(x[idx]), torch.from_numpy(y[idx]), f"cifar10/{split}")


# --- STL-10 -----------------------------------------------------------------


def _read_stl_images(path: Path) -> np.ndarray:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % (3 * 96 * 96):
        raise DatasetError(f"{path}: size is not a multiple of 3x96x96 bytes; expected STL-10 binary format")
    return raw.reshape(-1, 3, 96, 96).transpose(0, 1, 3, 2).copy()


def load_stl10(root: Path, split: str, seed: int = 0, verify: bool = True) -> ImageDataset:
    folder = root / STL10_FOLDER if (root / STL10_FOLDER).is_dir() else root
    fmt = f"the STL-10 binary version ({STL10_FOLDER}/train_X.bin, ...)"
    files = dict(STL10_FILES)
    if split not in ("pretrain", "val"):
        files.pop("unlabeled_X.bin")
    _check_files(folder, files, verify, fmt)
    if split in ("pretrain", "val"):
        x = _read_stl_images(folder / "unlabeled_X.bin")
        perm = np.random.default_rng(seed).permutation(len(x))
        idx = np.sort(perm[:STL10_UNLABELED_VAL_SIZE] if split == "val" else perm[STL10_UNLABELED_VAL_SIZE:])
        return ImageDataset(torch.from_numpy(x[idx]), None, f"stl10/{split}")
    stem = "train" if split == "probe-train" else "test"
    x = _read_stl_images(folder / f"{stem}_X.bin")
    y = np.fromfile(folder / f"{stem}_y.bin", dtype=np.uint8).astype(np.int64) - 1
    if split == "probe-train":
        keep, _ = stratified_split(y, STL10_PROBE_VAL_SIZE // 10, seed)
        x, y = x[keep], y[keep]
    return ImageDataset(torch.from_numpy(x), torch.from_numpy(y), f"stl10/{split}")


# --- image folder -----------------------------------------------------------


def load_image_folder(root: Path, split: str, image_size: int, seed: int = 0) -> ImageDataset:
    from PIL import Image

    base = root / ("test" if split == "probe-test" else "train")
    if not base.is_dir():
        if split == "probe-test":
            raise DatasetError(f"missing {base}; expected <root>/train/<class>/*.png and <root>/test/<class>/*.png")
        base = root
    classes = sorted(p.name for p in base.iterdir() if p.is_dir())
    if not classes:
        raise DatasetError(f"no class subdirectories under {base}; expected <root>/<class>/<image files>")
    images, labels = [], []
    for ci, cname in enumerate(classes):
        for path in sorted((base / cname).iterdir()):
            if path.suffix.lower() not in (".png", ".jpg", ".jpeg", ".bmp"):
                continue
            img = Image.open(path).convert("RGB").resize((image_size, image_size), Image.BILINEAR)
            images.append(np.asarray(img, dtype=np.uint8).transpose(2, 0, 1))
            labels.append(ci)
    if not images:
        raise DatasetError(f"no images found under {base}")
    x, y = np.stack(images), np.asarray(labels, dtype=np.int64)
    if split in ("pretrain", "val"):
        counts = np.bincount(y)
        train_idx, val_idx = stratified_split(y, {c: int(n // 10) for c, n in enumerate(counts)}, seed)
        idx = val_idx if split == "val" else train_idx
        x, y = x[idx], y[idx]
    return ImageDataset(torch.from_numpy(x), torch.from_numpy(y), f"image-folder/{split}")


# --- synthetic shapes -------------------------------------------------------


def _shape_mask(kind: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    # u, v: coordinates relative to the shape center in units of its radius; v points down
    au, av = np.abs(u), np.abs(v)
    if kind == 0:
        return u * u + v * v <= 1.0
    if kind == 1:
        return np.maximum(au, av) <= 0.8
    if kind in (2, 3):
        vv = v if kind == 2 else -v
        return (vv <= 0.7) & (vv >= -0.9) & (au <= (vv + 0.9) * 0.6)
    if kind in (4, 5):
        if kind == 5:
            u, v = (u + v) / np.sqrt(2), (u - v) / np.sqrt(2)
            au, av = np.abs(u), np.abs(v)
        return ((au <= 0.3) & (av <= 0.95)) | ((av <= 0.3) & (au <= 0.95))
    if kind == 6:
        r2 = u * u + v * v
        return (r2 <= 1.0) & (r2 >= 0.5**2)
    if kind == 7:
        return au + av <= 1.0
    if kind == 8:
        return (au <= 0.9) & ((np.abs(v - 0.45) <= 0.22) | (np.abs(v + 0.45) <= 0.22))
    if kind == 9:
        m = np.maximum(au, av)
        return (m <= 0.85) & (m >= 0.5)
    raise ValueError(kind)


def _contrasting_colors(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    luma = np.array([0.299, 0.587, 0.114])
    while True:
        fg, bg = rng.random(3), rng.random(3)
        if abs(fg @ luma - bg @ luma) >= 0.25:
            return fg, bg


def render_shapes(
    n: int, num_classes: int, size: int, seed: int, supersample: int = 2, noise: float = 0.03, radius_range: tuple[float, float] = RADIUS_RANGE
) -> tuple[np.ndarray, np.ndarray]:
    """Colored geometric shapes; class = shape, nuisance = position, scale, colors, pixel noise."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    labels = labels[rng.permutation(n)]
    big = size * supersample
    coords = (np.arange(big) + 0.5) / supersample
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    out = np.empty((n, 3, size, size), dtype=np.uint8)
    for i in range(n):
        radius = rng.uniform(*radius_range) * size
        cy, cx = rng.uniform(radius, size - radius, size=2)
        fg, bg = _contrasting_colors(rng)
        mask = _shape_mask(int(labels[i]), (xx - cx) / radius, (yy - cy) / radius)
        mask = mask.reshape(size, supersample, size, supersample).mean(axis=(1, 3))
        img = bg[:, None, None] * (1 - mask) + fg[:, None, None] * mask
        img = img + noise * rng.standard_normal(img.shape)
        out[i] = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return out, labels.astype(np.int64)


_SYNTHETIC_SPLIT_KEYS = {"pretrain": 0, "val": 1, "probe-train": 0, "probe-test": 2}


def load_synthetic(desc: DatasetDescriptor) -> ImageDataset:
    # probe-train reuses the pretraining images, now with labels
    key = _SYNTHETIC_SPLIT_KEYS[desc.split]
    n = desc.num_examples if key == 0 else max(desc.num_examples // 5, desc.num_classes)
    split_seed = int(np.random.SeedSequence([desc.seed, key]).generate_state(1)[0])
    x, y = render_shapes(n, desc.num_classes, desc.image_size, split_seed)
    return ImageDataset(torch.from_numpy(x), torch.from_numpy(y), f"synthetic/{desc.split}")


def resolve_root(desc: DatasetDescriptor) -> Path:
    root = desc.root or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise DatasetError(f"dataset {desc.name!r} needs a root path (set dataset.root or ${DATA_ROOT_ENV})")
    return Path(root)


def load_dataset(desc: DatasetDescriptor) -> ImageDataset:
    errors = desc.validate()
    if errors:
        raise DatasetError("; ".join(errors))
    if desc.name == "synthetic":
        ds = load_synthetic(desc)
    elif desc.name == "cifar10":
        ds = load_cifar10(resolve_root(desc), desc.split, desc.seed, desc.verify_checksums)
    elif desc.name == "stl10-labeled-subset":
        ds = load_stl10(resolve_root(desc), desc.split, desc.seed, desc.verify_checksums)
    else:
        ds = load_image_folder(resolve_root(desc), desc.split, desc.image_size, desc.seed)
    if desc.subset_fraction < 1.0:
        labels = None if ds.labels is None else ds.labels.numpy()
        if labels is None:
            keep = np.sort(np.random.default_rng(desc.seed).permutation(len(ds))[: int(round(desc.subset_fraction * len(ds)))])
        else:
            keep = stratified_subset(labels, desc.subset_fraction, desc.seed)
        ds = ds.subset(keep)
    return ds
