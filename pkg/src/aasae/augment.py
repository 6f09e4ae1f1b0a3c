"""Stochastic view generation ``x+ ~ A(a_c(x))`` with explicit randomness.

Pipeline order: random resized crop, horizontal flip, color jitter (random
sub-transform order), grayscale, optional channel drop. Defaults follow the
SimCLR augmentation recipe.

All randomness comes from the per-example generators passed in, so the
batched path and the single-image path produce identical views for
identical streams.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from aasae.rng import RngLike, as_generator

MAX_CROP_ATTEMPTS = 10
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

BRIGHTNESS, CONTRAST, SATURATION, HUE = range(4)


class AugmentationError(ValueError):
    pass


@dataclass
class AugmentationSpec:
    crop_output_size: tuple[int, int] | None = (32, 32)
    crop_scale_range: tuple[float, float] = (0.08, 1.0)
    crop_ratio_range: tuple[float, float] = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    jitter_strengths: tuple[float, float, float, float] = (0.8, 0.8, 0.8, 0.2)
    jitter_prob: float = 0.8
    grayscale_prob: float = 0.2
    channel_drop_prob: float = 0.0
    interpolation: str = "bilinear"
    identity: bool = False

    def __post_init__(self):
        if self.crop_output_size is not None:
            # an empty list stands for "keep input size" in TOML, which has no null
            self.crop_output_size = tuple(int(v) for v in self.crop_output_size) or None
        self.crop_scale_range = tuple(float(v) for v in self.crop_scale_range)
        self.crop_ratio_range = tuple(float(v) for v in self.crop_ratio_range)
        self.jitter_strengths = tuple(float(v) for v in self.jitter_strengths)
        errors = self.validate()
        if errors:
            raise AugmentationError("; ".join(errors))

    def validate(self) -> list[str]:
        errors = []
        for name in ("flip_prob", "jitter_prob", "grayscale_prob", "channel_drop_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                errors.append(f"augmentation.{name}: probability {p} outside [0, 1]")
        lo, hi = self.crop_scale_range
        if not (0.0 < lo <= hi <= 1.0):
            errors.append(f"augmentation.crop_scale_range: need 0 < lower <= upper <= 1, got {self.crop_scale_range}")
        rlo, rhi = self.crop_ratio_range
        if not (0.0 < rlo <= rhi):
            errors.append(f"augmentation.crop_ratio_range: need 0 < lower <= upper, got {self.crop_ratio_range}")
        if self.crop_output_size is not None and (len(self.crop_output_size) != 2 or min(self.crop_output_size) < 1):
            errors.append(f"augmentation.crop_output_size: need two positive ints, got {self.crop_output_size}")
        if len(self.jitter_strengths) != 4 or min(self.jitter_strengths) < 0:
            errors.append("augmentation.jitter_strengths: need 4 nonnegative values")
        elif self.jitter_strengths[HUE] > 0.5:
            errors.append("augmentation.jitter_strengths: hue strength must be <= 0.5")
        if self.interpolation != "bilinear":
            errors.append(f"augmentation.interpolation: only 'bilinear' is supported, got {self.interpolation!r}")
        return errors

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        if d["crop_output_size"] is None:
            d["crop_output_size"] = []
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationSpec":
        return cls(**d)

    @classmethod
    def identity_spec(cls) -> "AugmentationSpec":
        return cls(identity=True, crop_output_size=None)


@dataclass
class ViewParams:
    """Per-example draws; kept separate from pixel work so batching is exact."""

    crop: tuple[int, int, int, int]  # top, left, height, width
    flip: bool = False
    jitter: bool = False
    factors: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 0.0)
    order: tuple[int, ...] = field(default_factory=lambda: (0, 1, 2, 3))
    grayscale: bool = False
    drop_channel: int = -1


def sample_crop_box(h: int, w: int, spec: AugmentationSpec, gen: np.random.Generator) -> tuple[int, int, int, int]:
    if h < 1 or w < 1:
        raise AugmentationError(f"cannot crop an empty image of size {h}x{w}")
    area = h * w
    log_lo, log_hi = math.log(spec.crop_ratio_range[0]), math.log(spec.crop_ratio_range[1])
    for _ in range(MAX_CROP_ATTEMPTS):
        target_area = area * gen.uniform(*spec.crop_scale_range)
        aspect = math.exp(gen.uniform(log_lo, log_hi))
        cw = int(round(math.sqrt(target_area * aspect)))
        ch = int(round(math.sqrt(target_area / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(gen.integers(0, h - ch + 1))
            left = int(gen.integers(0, w - cw + 1))
            return top, left, ch, cw
    # center crop at the largest box whose aspect is inside the allowed range
    in_ratio = w / h
    if in_ratio < spec.crop_ratio_range[0]:
        cw, ch = w, int(round(w / spec.crop_ratio_range[0]))
    elif in_ratio > spec.crop_ratio_range[1]:
        ch, cw = h, int(round(h * spec.crop_ratio_range[1]))
    else:
        cw, ch = w, h
    ch, cw = max(1, min(ch, h)), max(1, min(cw, w))
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def sample_view_params(h: int, w: int, spec: AugmentationSpec, gen: np.random.Generator) -> ViewParams:
    params = ViewParams(crop=sample_crop_box(h, w, spec, gen))
    params.flip = bool(gen.random() < spec.flip_prob)
    if gen.random() < spec.jitter_prob:
        b, c, s, hue = spec.jitter_strengths
        params.jitter = True
        params.factors = (
            float(gen.uniform(max(0.0, 1 - b), 1 + b)),
            float(gen.uniform(max(0.0, 1 - c), 1 + c)),
            float(gen.uniform(max(0.0, 1 - s), 1 + s)),
            float(gen.uniform(-hue, hue)),
        )
        params.order = tuple(int(i) for i in gen.permutation(4))
    params.grayscale = bool(gen.random() < spec.grayscale_prob)
    if spec.channel_drop_prob > 0 and gen.random() < spec.channel_drop_prob:
        params.drop_channel = int(gen.integers(0, 3))
    return params


def _check_images(images: torch.Tensor) -> None:
    if images.ndim != 4:
        raise AugmentationError(f"expected (N, c, h, w) images, got shape {tuple(images.shape)}")
    if images.shape[-1] == 0 or images.shape[-2] == 0 or images.shape[-3] == 0:
        raise AugmentationError(f"cannot augment an empty image of shape {tuple(images.shape[1:])}")
    if not torch.isfinite(images).all():
        raise AugmentationError("image contains NaN or Inf values")


def resized_crop(image: torch.Tensor, box: tuple[int, int, int, int], size: tuple[int, int]) -> torch.Tensor:
    top, left, ch, cw = box
    patch = image[:, top : top + ch, left : left + cw]
    if (ch, cw) == tuple(size):
        return patch
    downscale = ch > size[0] or cw > size[1]
    out = F.interpolate(patch[None], size=size, mode="bilinear", align_corners=False, antialias=downscale)[0]
    return out.clamp_(0.0, 1.0)


def random_resized_crop(image: torch.Tensor, spec: AugmentationSpec, rng: RngLike) -> torch.Tensor:
    """Crop a random area/aspect box from a (c, h, w) image and resize it to ``spec.crop_output_size``."""
    _check_images(image[None])
    c, h, w = image.shape
    size = spec.crop_output_size or (h, w)
    box = sample_crop_box(h, w, spec, as_generator(rng))
    return resized_crop(image, box, size)


def grayscale(images: torch.Tensor) -> torch.Tensor:
    if images.shape[-3] != 3:
        return images
    r, g, b = images.unbind(dim=-3)
    lum = (LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b).unsqueeze(-3)
    return lum.expand_as(images).contiguous()


def _blend(a: torch.Tensor, b: torch.Tensor, ratio: torch.Tensor) -> torch.Tensor:
    return (ratio * a + (1.0 - ratio) * b).clamp(0.0, 1.0)


def rgb_to_hsv(images: torch.Tensor) -> torch.Tensor:
    r, g, b = images.unbind(dim=-3)
    maxc = images.amax(dim=-3)
    minc = images.amin(dim=-3)
    delta = maxc - minc
    flat = delta == 0
    ones = torch.ones_like(maxc)
    s = delta / torch.where(flat, ones, maxc)
    safe = torch.where(flat, ones, delta)
    rc, gc, bc = (maxc - r) / safe, (maxc - g) / safe, (maxc - b) / safe
    is_r = maxc == r
    is_g = (maxc == g) & ~is_r
    is_b = ~is_r & ~is_g
    hue = is_r * (bc - gc) + is_g * (2.0 + rc - bc) + is_b * (4.0 + gc - rc)
    hue = torch.fmod(hue / 6.0 + 1.0, 1.0)
    return torch.stack((hue, s, maxc), dim=-3)


def hsv_to_rgb(images: torch.Tensor) -> torch.Tensor:
    h, s, v = images.unbind(dim=-3)
    i = torch.floor(h * 6.0)
    f = h * 6.0 - i
    i = i.long() % 6
    p = (v * (1.0 - s)).clamp(0.0, 1.0)
    q = (v * (1.0 - s * f)).clamp(0.0, 1.0)
    t = (v * (1.0 - s * (1.0 - f))).clamp(0.0, 1.0)
    # sector table: rows are i = 0..5, columns are (r, g, b)
    table = torch.stack(
        [
            torch.stack((v, t, p), dim=-3),
            torch.stack((q, v, p), dim=-3),
            torch.stack((p, v, t), dim=-3),
            torch.stack((p, q, v), dim=-3),
            torch.stack((t, p, v), dim=-3),
            torch.stack((v, p, q), dim=-3),
        ],
        dim=0,
    )
    index = i.unsqueeze(-3).expand(images.shape).unsqueeze(0)
    return table.gather(0, index)[0]


def adjust_brightness(x: torch.Tensor, f: torch.Tensor) -> torch.Tensor:
    return (x * f).clamp(0.0, 1.0)


def adjust_contrast(x: torch.Tensor, f: torch.Tensor) -> torch.Tensor:
    mean = grayscale(x)[:, :1].mean(dim=(-3, -2, -1), keepdim=True) if x.shape[1] == 3 else x.mean(dim=(-3, -2, -1), keepdim=True)
    return _blend(x, mean, f)


def adjust_saturation(x: torch.Tensor, f: torch.Tensor) -> torch.Tensor:
    return _blend(x, grayscale(x), f)


def adjust_hue(x: torch.Tensor, shift: torch.Tensor) -> torch.Tensor:
    hsv = rgb_to_hsv(x)
    h = torch.remainder(hsv[:, 0:1] + shift, 1.0)
    return hsv_to_rgb(torch.cat((h, hsv[:, 1:]), dim=1))


_JITTER_OPS = {
    BRIGHTNESS: adjust_brightness,
    CONTRAST: adjust_contrast,
    SATURATION: adjust_saturation,
    HUE: adjust_hue,
}


def _apply_jitter(views: torch.Tensor, params: Sequence[ViewParams]) -> torch.Tensor:
    rgb = views.shape[1] == 3
    for slot in range(4):
        for op, fn in _JITTER_OPS.items():
            if not rgb and op in (SATURATION, HUE):
                continue
            idx = [n for n, p in enumerate(params) if p.jitter and p.order[slot] == op]
            if not idx:
                continue
            neutral = 0.0 if op == HUE else 1.0
            idx = [n for n in idx if params[n].factors[op] != neutral]
            if not idx:
                continue
            sel = torch.tensor(idx)
            f = torch.tensor([params[n].factors[op] for n in idx], dtype=views.dtype).view(-1, 1, 1, 1)
            views[sel] = fn(views[sel], f)
    return views


def apply_view_params(images: torch.Tensor, params: Sequence[ViewParams], size: tuple[int, int]) -> torch.Tensor:
    views = torch.stack([resized_crop(img, p.crop, size) for img, p in zip(images, params)])
    flip = [n for n, p in enumerate(params) if p.flip]
    if flip:
        sel = torch.tensor(flip)
        views[sel] = views[sel].flip(-1)
    if any(p.jitter for p in params):
        views = _apply_jitter(views, params)
    gray = [n for n, p in enumerate(params) if p.grayscale]
    if gray and views.shape[1] == 3:
        sel = torch.tensor(gray)
        views[sel] = grayscale(views[sel])
    for n, p in enumerate(params):
        if p.drop_channel >= 0:
            views[n, p.drop_channel % views.shape[1]] = 0.0
    return views


def augment_batch(images: torch.Tensor, spec: AugmentationSpec, rngs: Sequence[RngLike]) -> torch.Tensor:
    """One view per image; ``rngs[n]`` drives every random choice for image ``n``."""
    _check_images(images)
    if len(rngs) != images.shape[0]:
        raise AugmentationError(f"need one rng per image: {len(rngs)} rngs for {images.shape[0]} images")
    if spec.identity:
        return images
    h, w = images.shape[-2:]
    size = spec.crop_output_size or (h, w)
    params = [sample_view_params(h, w, spec, as_generator(r)) for r in rngs]
    return apply_view_params(images, params, size)


def augment(image: torch.Tensor, spec: AugmentationSpec, rng: RngLike) -> torch.Tensor:
    if image.ndim != 3:
        raise AugmentationError(f"expected a (c, h, w) image, got shape {tuple(image.shape)}")
    return augment_batch(image[None], spec, [rng])[0]
