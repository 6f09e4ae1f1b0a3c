"""Encoder / decoder networks and the Gaussian pieces of the stochastic autoencoder.

The encoder is a backbone followed by a projection head emitting ``2 * latent_dim``
values split into ``(mu, log_var)``. The decoder mirrors the backbone without
batch normalization and outputs the mean of a pixel-wise Gaussian whose
log standard deviation is a single scalar, learned or fixed.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision

from aasae.rng import RngLike, as_generator

BACKBONES = ("tiny-conv", "resnet18", "resnet34", "resnet50")
LOG_VAR_RANGE = (-20.0, 10.0)
LEARNED_LOG_SCALE_RANGE = (-10.0, 5.0)
FIXED_LOG_SCALE_RANGE = (-5.0, 2.0)
HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


class ModelError(ValueError):
    pass


@dataclass
class EncoderConfig:
    backbone: str = "tiny-conv"
    latent_dim: int = 128
    projection_hidden_dim: int = 512
    input_size: int = 32
    in_channels: int = 3
    width: int = 32  # tiny-conv only: channels of the first block

    def validate(self) -> list[str]:
        errors = []
        if self.backbone not in BACKBONES:
            errors.append(f"encoder.backbone: unknown backbone {self.backbone!r}, expected one of {BACKBONES}")
        for name in ("latent_dim", "projection_hidden_dim", "input_size", "in_channels", "width"):
            if int(getattr(self, name)) < 1:
                errors.append(f"encoder.{name}: must be a positive integer")
        if self.backbone in BACKBONES and not errors and backbone_feature_dim(self) < self.latent_dim:
            errors.append(f"encoder.latent_dim: {self.latent_dim} exceeds backbone feature dim {backbone_feature_dim(self)}")
        return errors


@dataclass
class DecoderConfig:
    architecture: str = "tiny-conv"
    output_channels: int = 3
    output_size: int = 32
    batchnorm: bool = False
    width: int = 32

    def validate(self) -> list[str]:
        errors = []
        if self.architecture not in BACKBONES:
            errors.append(f"decoder.architecture: unknown architecture {self.architecture!r}, expected one of {BACKBONES}")
        if self.batchnorm:
            errors.append("decoder.batchnorm: the decoder never uses batch normalization; must be false")
        for name in ("output_channels", "output_size", "width"):
            if int(getattr(self, name)) < 1:
                errors.append(f"decoder.{name}: must be a positive integer")
        if self.output_size % 8:
            errors.append(f"decoder.output_size: must be divisible by 8, got {self.output_size}")
        return errors


class LatentPosterior(NamedTuple):
    mu: torch.Tensor
    log_var: torch.Tensor

    @property
    def std(self) -> torch.Tensor:
        return torch.exp(0.5 * self.log_var)


class ReconDistribution(NamedTuple):
    mean: torch.Tensor
    log_scale: torch.Tensor
    mode: str = "learned"


def backbone_feature_dim(cfg: EncoderConfig) -> int:
    return {"tiny-conv": 8 * cfg.width, "resnet18": 512, "resnet34": 512, "resnet50": 2048}[cfg.backbone]


def _large_input(size: int) -> bool:
    return size > 64


# --- backbones -------------------------------------------------------------


def _conv_block(cin: int, cout: int, stride: int) -> nn.Sequential:
    # GroupNorm keeps the tiny backbone's forward pass per-example.
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.GroupNorm(min(8, cout), cout),
        nn.ReLU(inplace=True),
    )


class TinyConvBackbone(nn.Module):
    def __init__(self, in_channels: int = 3, width: int = 32):
        super().__init__()
        self.features = nn.Sequential(
            _conv_block(in_channels, width, 1),
            _conv_block(width, 2 * width, 2),
            _conv_block(2 * width, 4 * width, 2),
            _conv_block(4 * width, 8 * width, 2),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )
        self.out_dim = 8 * width

    def forward(self, x):
        return self.features(x)


def resnet_backbone(name: str, in_channels: int, input_size: int) -> nn.Module:
    net = getattr(torchvision.models, name)(weights=None)
    if not _large_input(input_size):
        # small-image stem: 3x3 stride-1 conv, no max-pool
        net.conv1 = nn.Conv2d(in_channels, 64, 3, stride=1, padding=1, bias=False)
        net.maxpool = nn.Identity()
    elif in_channels != 3:
        net.conv1 = nn.Conv2d(in_channels, 64, 7, stride=2, padding=3, bias=False)
    net.fc = nn.Identity()
    return net


def build_backbone(cfg: EncoderConfig) -> nn.Module:
    if cfg.backbone == "tiny-conv":
        return TinyConvBackbone(cfg.in_channels, cfg.width)
    return resnet_backbone(cfg.backbone, cfg.in_channels, cfg.input_size)


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        errors = cfg.validate()
        if errors:
            raise ModelError("; ".join(errors))
        self.cfg = cfg
        self.backbone = build_backbone(cfg)
        feat = backbone_feature_dim(cfg)
        self.projection = nn.Sequential(
            nn.Linear(feat, cfg.projection_hidden_dim),
            nn.ReLU(inplace=True),
            nn.Linear(cfg.projection_hidden_dim, 2 * cfg.latent_dim),
        )

    def check_input(self, x: torch.Tensor) -> None:
        expected = (self.cfg.in_channels, self.cfg.input_size, self.cfg.input_size)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ModelError(f"encoder expects input of shape (N, {', '.join(map(str, expected))}), got {tuple(x.shape)}")

    def features(self, x: torch.Tensor) -> torch.Tensor:
        self.check_input(x)
        return self.backbone(x)

    def forward(self, x: torch.Tensor) -> LatentPosterior:
        out = self.projection(self.features(x))
        mu, log_var = out.chunk(2, dim=1)
        return LatentPosterior(mu, log_var.clamp(*LOG_VAR_RANGE))


# --- decoders --------------------------------------------------------------


class TinyConvDecoder(nn.Module):
    def __init__(self, latent_dim: int, out_channels: int, output_size: int, width: int = 32):
        super().__init__()
        self.start = output_size // 8
        self.top = 8 * width
        self.fc = nn.Linear(latent_dim, self.top * self.start * self.start)
        layers = []
        ch = self.top
        for _ in range(3):
            layers += [nn.ConvTranspose2d(ch, ch // 2, 4, stride=2, padding=1), nn.ReLU(inplace=True)]
            ch //= 2
        layers.append(nn.Conv2d(ch, out_channels, 3, padding=1))
        self.body = nn.Sequential(*layers)

    def forward(self, z):
        h = F.relu(self.fc(z)).view(-1, self.top, self.start, self.start)
        return self.body(h)


class DecoderBasicBlock(nn.Module):
    expansion = 1

    def __init__(self, cin: int, cout: int, upsample: bool):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cin, 3, padding=1)
        self.up = nn.Upsample(scale_factor=2, mode="nearest") if upsample else nn.Identity()
        self.conv2 = nn.Conv2d(cin, cout, 3, padding=1)
        self.shortcut = nn.Identity()
        if upsample or cin != cout:
            self.shortcut = nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest") if upsample else nn.Identity(), nn.Conv2d(cin, cout, 1))

    def forward(self, x):
        out = F.relu(self.conv1(x))
        out = self.conv2(self.up(out))
        return F.relu(out + self.shortcut(x))


class DecoderBottleneck(nn.Module):
    expansion = 4

    def __init__(self, cin: int, cout: int, upsample: bool):
        super().__init__()
        mid = max(cout // self.expansion, 16)
        self.conv1 = nn.Conv2d(cin, mid, 1)
        self.conv2 = nn.Conv2d(mid, mid, 3, padding=1)
        self.up = nn.Upsample(scale_factor=2, mode="nearest") if upsample else nn.Identity()
        self.conv3 = nn.Conv2d(mid, cout, 1)
        self.shortcut = nn.Identity()
        if upsample or cin != cout:
            self.shortcut = nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest") if upsample else nn.Identity(), nn.Conv2d(cin, cout, 1))

    def forward(self, x):
        out = F.relu(self.conv1(x))
        out = F.relu(self.conv2(out))
        out = self.conv3(self.up(out))
        return F.relu(out + self.shortcut(x))


_RESNET_LAYOUT = {
    "resnet18": (DecoderBasicBlock, (2, 2, 2, 2)),
    "resnet34": (DecoderBasicBlock, (3, 4, 6, 3)),
    "resnet50": (DecoderBottleneck, (3, 4, 6, 3)),
}


class ResNetDecoder(nn.Module):
    """Residual backbone run in reverse: stages from deepest to shallowest, upsampling instead of striding."""

    def __init__(self, arch: str, latent_dim: int, out_channels: int, output_size: int):
        super().__init__()
        block, layers = _RESNET_LAYOUT[arch]
        widths = [64 * block.expansion, 128 * block.expansion, 256 * block.expansion, 512 * block.expansion]
        self.large = _large_input(output_size)
        self.start = output_size // (32 if self.large else 8)
        self.top = widths[-1]
        self.fc = nn.Linear(latent_dim, self.top * self.start * self.start)
        stages = []
        cin = widths[-1]
        for stage in reversed(range(4)):
            cout = widths[stage - 1] if stage > 0 else 64
            n = layers[stage]
            blocks = [block(cin, cin, False) for _ in range(n - 1)]
            blocks.append(block(cin, cout, upsample=stage > 0))
            stages.append(nn.Sequential(*blocks))
            cin = cout
        self.stages = nn.Sequential(*stages)
        self.head = nn.Sequential(
            nn.Upsample(scale_factor=4, mode="nearest") if self.large else nn.Identity(),
            nn.Conv2d(64, out_channels, 3, padding=1),
        )

    def forward(self, z):
        h = F.relu(self.fc(z)).view(-1, self.top, self.start, self.start)
        return self.head(self.stages(h))


class Decoder(nn.Module):
    def __init__(self, cfg: DecoderConfig, latent_dim: int):
        super().__init__()
        errors = cfg.validate()
        if errors:
            raise ModelError("; ".join(errors))
        self.cfg = cfg
        self.latent_dim = latent_dim
        if cfg.architecture == "tiny-conv":
            self.net = TinyConvDecoder(latent_dim, cfg.output_channels, cfg.output_size, cfg.width)
        else:
            if _large_input(cfg.output_size) and cfg.output_size % 32:
                raise ModelError(f"decoder.output_size: must be divisible by 32 for large inputs, got {cfg.output_size}")
            self.net = ResNetDecoder(cfg.architecture, latent_dim, cfg.output_channels, cfg.output_size)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ModelError(f"decoder expects latents of shape (N, {self.latent_dim}), got {tuple(z.shape)}")
        return self.net(z)


# --- full model ------------------------------------------------------------


class StochasticAutoencoder(nn.Module):
    def __init__(self, encoder_cfg: EncoderConfig, decoder_cfg: DecoderConfig, logscale_mode: str = "learned", log_scale: float = 0.0):
        super().__init__()
        if logscale_mode not in ("learned", "fixed"):
            raise ModelError(f"logscale_mode must be 'learned' or 'fixed', got {logscale_mode!r}")
        self.encoder = Encoder(encoder_cfg)
        self.decoder = Decoder(decoder_cfg, encoder_cfg.latent_dim)
        self.logscale_mode = logscale_mode
        init = torch.tensor(float(log_scale))
        if logscale_mode == "learned":
            self.log_scale = nn.Parameter(init)
        else:
            lo, hi = FIXED_LOG_SCALE_RANGE
            if not lo <= log_scale <= hi:
                raise ModelError(f"fixed log_scale {log_scale} outside [{lo}, {hi}]")
            self.register_buffer("log_scale", init)

    @property
    def latent_dim(self) -> int:
        return self.encoder.cfg.latent_dim

    def current_log_scale(self) -> torch.Tensor:
        if self.logscale_mode == "learned":
            return self.log_scale.clamp(*LEARNED_LOG_SCALE_RANGE)
        return self.log_scale

    def encode(self, x: torch.Tensor) -> LatentPosterior:
        return self.encoder(x)

    def decode(self, z: torch.Tensor) -> ReconDistribution:
        return ReconDistribution(self.decoder(z), self.current_log_scale(), self.logscale_mode)


def encode(model: StochasticAutoencoder, x: torch.Tensor) -> LatentPosterior:
    return model.encode(x)


def decode(model: StochasticAutoencoder, z: torch.Tensor) -> ReconDistribution:
    return model.decode(z)


def draw_noise(rngs: Sequence[RngLike], dim: int, dtype=torch.float32) -> torch.Tensor:
    """Standard-normal noise, row ``n`` drawn from ``rngs[n]``."""
    rows = [as_generator(r).standard_normal(dim) for r in rngs]
    return torch.as_tensor(np.stack(rows), dtype=dtype)


def sample_latent(post: LatentPosterior, rng: RngLike | Sequence[RngLike] | None = None, eps: torch.Tensor | None = None) -> torch.Tensor:
    """Reparameterized draw ``z = mu + exp(0.5 * log_var) * eps``."""
    if eps is None:
        if rng is None:
            raise ModelError("sample_latent needs either rng or eps")
        if post.mu.ndim == 1:
            eps = draw_noise([rng], post.mu.shape[0], post.mu.dtype)[0]
        else:
            rngs = rng if isinstance(rng, (list, tuple)) else [rng] if post.mu.shape[0] == 1 else None
            if rngs is None or len(rngs) != post.mu.shape[0]:
                raise ModelError("batched sample_latent needs one rng per row")
            eps = draw_noise(rngs, post.mu.shape[1], post.mu.dtype)
    return post.mu + torch.exp(0.5 * post.log_var) * eps


def recon_log_prob(recon: ReconDistribution, target: torch.Tensor) -> torch.Tensor:
    """Gaussian log-density summed over pixels; one value per example for batched input."""
    mean, s = recon.mean, recon.log_scale
    if mean.shape != target.shape:
        raise ModelError(f"reconstruction shape {tuple(mean.shape)} does not match target {tuple(target.shape)}")
    if torch.isnan(mean).any() or torch.isnan(target).any() or torch.isnan(torch.as_tensor(s)).any():
        raise ModelError("NaN in reconstruction log-probability inputs")
    s = torch.as_tensor(s, dtype=mean.dtype)
    lp = -HALF_LOG_2PI - s - 0.5 * (target - mean) ** 2 * torch.exp(-2.0 * s)
    if lp.ndim <= 3:
        return lp.sum()
    return lp.flatten(1).sum(1)


def sample_fixed_logscale(seed: int) -> float:
    lo, hi = FIXED_LOG_SCALE_RANGE
    return float(np.random.default_rng(seed).uniform(lo, hi))


def has_batchnorm(module: nn.Module) -> bool:
    return any(isinstance(m, nn.modules.batchnorm._BatchNorm) for m in module.modules())


def param_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def build_model(encoder_cfg: EncoderConfig, decoder_cfg: DecoderConfig, logscale_mode: str = "learned", log_scale: float = 0.0) -> StochasticAutoencoder:
    return StochasticAutoencoder(encoder_cfg, decoder_cfg, logscale_mode, log_scale)
