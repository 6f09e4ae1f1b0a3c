import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from aasae.augment import AugmentationSpec
from aasae.model import DecoderConfig, EncoderConfig, LatentPosterior, ReconDistribution, build_model
from aasae.objective import (
    NOISE_STREAM,
    ObjectiveConfig,
    ObjectiveError,
    aaae_loss,
    aasae_loss,
    ae_loss,
    hybrid_loss,
    kl_to_standard_normal,
    objective_terms,
    vae_loss,
)
from aasae.rng import RngState

SPEC = AugmentationSpec(crop_output_size=(16, 16))


def tiny(seed=0, dtype=torch.float32, logscale=-1.0):
    torch.manual_seed(seed)
    m = build_model(
        EncoderConfig(latent_dim=8, input_size=16, width=8, projection_hidden_dim=32),
        DecoderConfig(output_size=16, width=8),
        log_scale=logscale,
    )
    return m.to(dtype)


def batch(n=4, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, 16, 16, generator=g).to(dtype)


class LinearModel(torch.nn.Module):
    """Hand-checkable model: mu = A x, log_var = B x, mean = C z."""

    def __init__(self, d_in, d_lat, seed=0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.A = torch.nn.Parameter(0.1 * torch.randn(d_lat, d_in, generator=g, dtype=torch.float64))
        self.B = torch.nn.Parameter(0.1 * torch.randn(d_lat, d_in, generator=g, dtype=torch.float64))
        self.C = torch.nn.Parameter(0.1 * torch.randn(d_in, d_lat, generator=g, dtype=torch.float64))
        self.s = torch.nn.Parameter(torch.tensor(-0.3, dtype=torch.float64))

    def encode(self, x):
        f = x.flatten(1)
        return LatentPosterior(f @ self.A.T, f @ self.B.T)

    def decode(self, z):
        return ReconDistribution((z @ self.C.T).view(z.shape[0], 3, 2, 2), self.s)


def _numpy_oracle(model, x, eps, beta, sampling):
    A, B, C, s = (t.detach().numpy() for t in (model.A, model.B, model.C, model.s))
    f = x.reshape(x.shape[0], -1).numpy()
    mu, lv = f @ A.T, f @ B.T
    z = mu + np.exp(0.5 * lv) * eps if sampling else mu
    mean = z @ C.T
    nll = (0.5 * math.log(2 * math.pi) + s + 0.5 * (f - mean) ** 2 * np.exp(-2 * s)).sum(1)
    kl = 0.5 * (np.exp(lv) + mu**2 - 1 - lv).sum(1)
    return float(np.mean(nll + beta * kl))


# --- config -----------------------------------------------------------------------


@pytest.mark.parametrize(
    "variant, sampling, augmented, beta",
    [("AE", False, False, 0.0), ("AAAE", False, True, 0.0), ("VAE", True, False, 1.0), ("AASAE", True, True, 0.0), ("HYBRID", True, True, 0.0)],
)
def test_variant_flags(variant, sampling, augmented, beta):
    cfg = ObjectiveConfig(variant)
    assert (cfg.sampling, cfg.augmented_input, cfg.beta) == (sampling, augmented, beta)


def test_invalid_objective_configs():
    with pytest.raises(ObjectiveError, match="unknown variant"):
        ObjectiveConfig("GAN")
    with pytest.raises(ObjectiveError, match="beta"):
        ObjectiveConfig("VAE", beta=0.0)
    with pytest.raises(ObjectiveError, match="beta"):
        ObjectiveConfig("HYBRID", beta=-1.0)
    with pytest.raises(ObjectiveError, match="beta"):
        ObjectiveConfig("AASAE", beta=0.5)
    with pytest.raises(ObjectiveError, match="requires"):
        ObjectiveConfig("AE", sampling=True)
    with pytest.raises(ObjectiveError):
        hybrid_loss(batch(), tiny(), SPEC, beta=-0.1, rng=RngState(0))


def test_stochastic_objectives_need_rng():
    with pytest.raises(ObjectiveError, match="rng"):
        aasae_loss(batch(), tiny(), SPEC)
    with pytest.raises(ObjectiveError, match="rng"):
        vae_loss(batch(), tiny())
    # the deterministic AE needs none
    ae_loss(batch(), tiny())


def test_rejects_bad_batch_and_stream_count():
    with pytest.raises(ObjectiveError, match="nonempty"):
        ae_loss(torch.zeros(0, 3, 16, 16), tiny())
    with pytest.raises(ObjectiveError, match="one rng stream per example"):
        aasae_loss(batch(4), tiny(), SPEC, rng=[RngState(0)] * 3)
    with pytest.raises(ObjectiveError, match="AugmentationSpec"):
        objective_terms(tiny(), batch(), ObjectiveConfig("AAAE"), None, RngState(0))


# --- KL ---------------------------------------------------------------------------


def test_kl_known_values():
    # KL(N(1, 1) || N(0, 1)) = 0.5; KL(N(0, e^2)||N(0,1)) = 0.5 (e^2 - 1 - 2)
    post = LatentPosterior(torch.tensor([[1.0], [0.0]], dtype=torch.float64), torch.tensor([[0.0], [2.0]], dtype=torch.float64))
    kl = kl_to_standard_normal(post)
    assert kl[0].item() == pytest.approx(0.5, abs=1e-12)
    assert kl[1].item() == pytest.approx(0.5 * (math.e**2 - 3), abs=1e-12)
    # var 0.5, mean 0: 0.5 (0.5 - 1 - ln 0.5) = 0.0965735902799727
    half = LatentPosterior(torch.zeros(1, 1, dtype=torch.float64), torch.full((1, 1), math.log(0.5), dtype=torch.float64))
    assert kl_to_standard_normal(half).item() == pytest.approx(0.0965735902799727, abs=1e-12)


@given(
    st.lists(st.tuples(st.floats(-3, 3), st.floats(-4, 2)), min_size=1, max_size=6),
)
@settings(max_examples=50, deadline=None)
def test_kl_is_nonnegative_and_zero_only_at_prior(pairs):
    mu = torch.tensor([[p[0] for p in pairs]], dtype=torch.float64)
    lv = torch.tensor([[p[1] for p in pairs]], dtype=torch.float64)
    kl = kl_to_standard_normal(LatentPosterior(mu, lv)).item()
    assert kl >= -1e-12
    assert kl_to_standard_normal(LatentPosterior(torch.zeros_like(mu), torch.zeros_like(lv))).item() == 0.0


def test_kl_small_monte_carlo():
    rng = np.random.default_rng(0)
    mu, lv = np.array([0.7, -1.2, 0.1]), np.array([-0.5, 0.3, -2.0])
    sd = np.exp(0.5 * lv)
    z = mu + sd * rng.standard_normal((200_000, 3))
    logq = (-0.5 * ((z - mu) / sd) ** 2 - np.log(sd) - 0.5 * np.log(2 * np.pi)).sum(1)
    logp = (-0.5 * z**2 - 0.5 * np.log(2 * np.pi)).sum(1)
    d = logq - logp
    closed = kl_to_standard_normal(LatentPosterior(torch.tensor(mu), torch.tensor(lv))).item()
    assert abs(d.mean() - closed) < 4 * d.std() / np.sqrt(len(d))


# --- end-to-end against a hand-checkable model ------------------------------------------


@pytest.mark.parametrize("variant, beta", [("AE", None), ("VAE", 1.0), ("VAE", 2.5), ("HYBRID", 0.3)])
def test_objective_matches_numpy_oracle(variant, beta):
    x = batch(3, dtype=torch.float64)[:, :, :2, :2]
    model = LinearModel(12, 5)
    spec = AugmentationSpec.identity_spec()
    cfg = ObjectiveConfig(variant, beta=beta)
    eps = torch.tensor(np.random.default_rng(1).standard_normal((3, 5)))
    terms = objective_terms(model, x, cfg, spec, eps=eps if cfg.sampling else None)
    expected = _numpy_oracle(model, x, eps.numpy(), cfg.beta, cfg.sampling)
    assert terms.loss.item() == pytest.approx(expected, rel=1e-12)


def test_noise_comes_from_per_example_noise_stream():
    x = batch(2, dtype=torch.float64)[:, :, :2, :2]
    model = LinearModel(12, 5)
    root = RngState(4)
    streams = [root.derive(i) for i in range(2)]
    eps = np.stack([s.derive(NOISE_STREAM).generator().standard_normal(5) for s in streams])
    loss = vae_loss(x, model, rng=root).item()
    assert loss == pytest.approx(_numpy_oracle(model, x, eps, 1.0, True), rel=1e-12)


# --- reductions -------------------------------------------------------------------


def test_hybrid_beta_zero_equals_aasae():
    m, x = tiny(), batch()
    assert torch.equal(hybrid_loss(x, m, SPEC, 0.0, RngState(3)), aasae_loss(x, m, SPEC, RngState(3)))


def test_aasae_identity_zero_noise_equals_ae():
    m, x = tiny(), batch()
    eps = torch.zeros(4, 8)
    assert torch.equal(aasae_loss(x, m, AugmentationSpec.identity_spec(), eps=eps), ae_loss(x, m))


def test_aaae_identity_equals_ae():
    m, x = tiny(), batch()
    assert torch.equal(aaae_loss(x, m, AugmentationSpec.identity_spec()), ae_loss(x, m))


def test_hybrid_identity_beta_one_equals_vae():
    m, x = tiny(), batch()
    ident = AugmentationSpec.identity_spec()
    assert torch.equal(hybrid_loss(x, m, ident, 1.0, RngState(8)), vae_loss(x, m, 1.0, RngState(8)))


# --- decomposability --------------------------------------------------------------


@pytest.mark.parametrize("variant, beta", [("AE", None), ("AAAE", None), ("VAE", 1.0), ("AASAE", None), ("HYBRID", 0.5)])
def test_batch_loss_is_mean_of_singletons(variant, beta):
    m, x = tiny(dtype=torch.float64), batch(5, dtype=torch.float64)
    cfg = ObjectiveConfig(variant, beta=beta)
    streams = [RngState(11).derive(i) for i in range(5)]
    full = objective_terms(m, x, cfg, SPEC, streams).loss.item()
    singles = [objective_terms(m, x[i : i + 1], cfg, SPEC, [streams[i]]).loss.item() for i in range(5)]
    assert abs(full - np.mean(singles)) / abs(full) < 1e-6


# --- gradients --------------------------------------------------------------------


def test_full_objective_gradient_finite_difference():
    m, x = tiny(dtype=torch.float64), batch(2, dtype=torch.float64)
    cfg = ObjectiveConfig("HYBRID", beta=0.5)
    rng = RngState(2)
    loss = objective_terms(m, x, cfg, SPEC, rng).loss
    params = dict(m.named_parameters())
    grads = torch.autograd.grad(loss, list(params.values()))
    h = 1e-6
    checked = 0
    for (name, p), g in zip(params.items(), grads):
        flat = p.detach().view(-1)
        k = int(torch.argmax(g.abs().view(-1)))
        with torch.no_grad():
            flat[k] += h
            up = objective_terms(m, x, cfg, SPEC, rng).loss.item()
            flat[k] -= 2 * h
            down = objective_terms(m, x, cfg, SPEC, rng).loss.item()
            flat[k] += h
        fd = (up - down) / (2 * h)
        gk = g.view(-1)[k].item()
        if abs(fd) > 1e-4:
            assert abs(gk - fd) / abs(fd) < 1e-3, name
            checked += 1
    assert checked >= 5


def test_loss_terms_bookkeeping():
    m, x = tiny(), batch()
    t = objective_terms(m, x, ObjectiveConfig("HYBRID", beta=2.0), SPEC, RngState(0))
    assert t.per_example.shape == (4,)
    assert t.loss.item() == pytest.approx((t.recon_nll + 2.0 * t.kl).item(), rel=1e-5)
