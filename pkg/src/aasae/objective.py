"""Training objectives: AE, AAAE, VAE, AASAE and the beta-weighted hybrid.

Every variant is the same computation with three switches: whether the
encoder sees an augmented view, whether the latent is a reparameterized
sample or the posterior mean, and the KL weight. All of them are means of
independent per-example terms, so with matched per-example streams a batch
loss equals the average of singleton-batch losses.

Losses are minimized, so the reconstruction log-likelihood enters negated.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import torch

from aasae.augment import AugmentationSpec, augment_batch
from aasae.model import LatentPosterior, StochasticAutoencoder, draw_noise, recon_log_prob, sample_latent
from aasae.rng import RngState, example_streams

VARIANTS = ("AE", "AAAE", "VAE", "AASAE", "HYBRID")
# variant -> (sampling, augmented_input)
_VARIANT_FLAGS = {
    "AE": (False, False),
    "AAAE": (False, True),
    "VAE": (True, False),
    "AASAE": (True, True),
    "HYBRID": (True, True),
}
VIEW_STREAM, NOISE_STREAM = 0, 1


class ObjectiveError(ValueError):
    pass


@dataclass
class ObjectiveConfig:
    variant: str = "AASAE"
    beta: float | None = None
    sampling: bool | None = None
    augmented_input: bool | None = None

    def __post_init__(self):
        self.variant = str(self.variant).upper()
        if self.variant not in VARIANTS:
            raise ObjectiveError(f"objective.variant: unknown variant {self.variant!r}, expected one of {VARIANTS}")
        sampling, augmented = _VARIANT_FLAGS[self.variant]
        if self.beta is None:
            self.beta = 1.0 if self.variant == "VAE" else 0.0
        self.beta = float(self.beta)
        if self.sampling is None:
            self.sampling = sampling
        if self.augmented_input is None:
            self.augmented_input = augmented
        errors = self.validate()
        if errors:
            raise ObjectiveError("; ".join(errors))

    def validate(self) -> list[str]:
        errors = []
        sampling, augmented = _VARIANT_FLAGS[self.variant]
        if (self.sampling, self.augmented_input) != (sampling, augmented):
            errors.append(
                f"objective: variant {self.variant} requires sampling={sampling}, augmented_input={augmented}"
            )
        if self.variant in ("AE", "AAAE", "AASAE") and self.beta != 0.0:
            errors.append(f"objective.beta: variant {self.variant} has no KL term, beta must be 0")
        if self.variant == "VAE" and not self.beta > 0:
            errors.append("objective.beta: VAE needs beta > 0")
        if self.variant == "HYBRID" and self.beta < 0:
            errors.append("objective.beta: must be nonnegative")
        return errors

    def to_dict(self) -> dict:
        return asdict(self)


class LossTerms(NamedTuple):
    loss: torch.Tensor  # scalar, what gets minimized
    recon_nll: torch.Tensor  # batch mean of -log p(x | z)
    kl: torch.Tensor  # batch mean of KL(q(z | input) || N(0, I))
    per_example: torch.Tensor  # (N,)
    posterior: LatentPosterior


def kl_to_standard_normal(post: LatentPosterior) -> torch.Tensor:
    """Closed-form KL(N(mu, exp(log_var)) || N(0, I)); per row for batched posteriors."""
    mu, lv = post.mu, post.log_var
    terms = 0.5 * (torch.exp(lv) + mu * mu - 1.0 - lv)
    return terms.sum(-1)


def _streams(rng: RngState | Sequence[RngState] | None, n: int, needed: bool) -> list[RngState] | None:
    if rng is None:
        if needed:
            raise ObjectiveError("this objective is stochastic and needs an rng")
        return None
    if isinstance(rng, RngState):
        return example_streams(rng, n)
    streams = list(rng)
    if len(streams) != n:
        raise ObjectiveError(f"need one rng stream per example: got {len(streams)} for a batch of {n}")
    return streams


def objective_terms(
    model: StochasticAutoencoder,
    batch: torch.Tensor,
    cfg: ObjectiveConfig,
    spec: AugmentationSpec | None = None,
    rng: RngState | Sequence[RngState] | None = None,
    eps: torch.Tensor | None = None,
) -> LossTerms:
    """Shared path for all variants.

    ``rng`` is either one ``RngState`` (example ``n`` then uses ``rng.derive(n)``)
    or an explicit per-example list. Each example stream splits into a view
    stream and a latent-noise stream, so views and noise never share draws.
    ``eps`` overrides the latent noise (e.g. zeros for the deterministic reduction).
    """
    if batch.ndim != 4 or batch.shape[0] == 0:
        raise ObjectiveError(f"need a nonempty (N, c, h, w) batch, got shape {tuple(batch.shape)}")
    n = batch.shape[0]
    need_views = cfg.augmented_input and not (spec is not None and spec.identity)
    need_noise = cfg.sampling and eps is None
    streams = _streams(rng, n, need_views or need_noise)

    inputs = batch
    if cfg.augmented_input:
        if spec is None:
            raise ObjectiveError(f"variant {cfg.variant} needs an AugmentationSpec")
        view_rngs = [s.derive(VIEW_STREAM) for s in streams] if streams else [None] * n
        inputs = augment_batch(batch, spec, view_rngs) if not spec.identity else batch

    post = model.encode(inputs)
    if cfg.sampling:
        if eps is None:
            eps = draw_noise([s.derive(NOISE_STREAM) for s in streams], post.mu.shape[1], post.mu.dtype)
        z = sample_latent(post, eps=eps)
    else:
        z = post.mu

    rec = recon_log_prob(model.decode(z), batch)
    kl = kl_to_standard_normal(post)
    per_example = -rec
    if cfg.beta != 0.0:
        per_example = per_example + cfg.beta * kl
    return LossTerms(per_example.mean(), (-rec).mean(), kl.mean(), per_example, post)


def ae_loss(batch, model, rng=None) -> torch.Tensor:
    return objective_terms(model, batch, ObjectiveConfig("AE"), rng=rng).loss


def aaae_loss(batch, model, spec: AugmentationSpec, rng=None) -> torch.Tensor:
    return objective_terms(model, batch, ObjectiveConfig("AAAE"), spec, rng).loss


def vae_loss(batch, model, beta: float = 1.0, rng=None, eps=None) -> torch.Tensor:
    return objective_terms(model, batch, ObjectiveConfig("VAE", beta=beta), rng=rng, eps=eps).loss


def aasae_loss(batch, model, spec: AugmentationSpec, rng=None, eps=None) -> torch.Tensor:
    return objective_terms(model, batch, ObjectiveConfig("AASAE"), spec, rng, eps).loss


def hybrid_loss(batch, model, spec: AugmentationSpec, beta: float, rng=None, eps=None) -> torch.Tensor:
    if beta < 0:
        raise ObjectiveError(f"hybrid beta must be nonnegative, got {beta}")
    return objective_terms(model, batch, ObjectiveConfig("HYBRID", beta=beta), spec, rng, eps).loss
