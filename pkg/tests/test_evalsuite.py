import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from aasae.augment import AugmentationSpec
from aasae.data import ImageDataset, render_shapes
from aasae.evalsuite import (
    EvalError,
    EvalReport,
    ProbeConfig,
    accuracy_spread,
    alignment_report,
    apply_axis,
    cosine_similarity_matrix,
    linear_probe,
    default_sweep,
    probe_features,
    read_ablation_csv,
    run_ablation,
    summarize_similarity,
)
from aasae.model import DecoderConfig, EncoderConfig, build_model, param_checksum
from aasae.objective import ObjectiveConfig
from aasae.rng import RngState
from aasae.trainer import TrainConfig

SPEC = AugmentationSpec(crop_output_size=(8, 8))


def tiny_model(seed=0):
    torch.manual_seed(seed)
    return build_model(EncoderConfig(latent_dim=16, input_size=8, width=4, projection_hidden_dim=32), DecoderConfig(output_size=8, width=4))


@pytest.fixture(scope="module")
def shapes():
    x, y = render_shapes(60, 3, 8, seed=0)
    ds = ImageDataset(torch.from_numpy(x), torch.from_numpy(y), "tiny")
    return ds.subset(range(40)), ds.subset(range(40, 60))


# --- probe ------------------------------------------------------------------------


def test_probe_lr_scaling():
    assert ProbeConfig(batch_size=256).lr == pytest.approx(0.1)
    assert ProbeConfig(batch_size=64).lr == pytest.approx(0.025)


def test_probe_separable_features():
    g = torch.Generator().manual_seed(0)
    centers = 5 * torch.randn(4, 10, generator=g)
    y = torch.arange(400) % 4
    x = centers[y] + torch.randn(400, 10, generator=g)
    acc, train_acc = probe_features(x[:300], y[:300], x[300:], y[300:], ProbeConfig(epochs=20, batch_size=32))
    assert acc > 0.97 and train_acc > 0.97


def test_probe_chance_on_noise():
    g = torch.Generator().manual_seed(1)
    x = torch.randn(1000, 5, generator=g)
    y = torch.randint(0, 2, (1000,), generator=g)
    acc, _ = probe_features(x[:800], y[:800], x[800:], y[800:], ProbeConfig(epochs=5))
    assert 0.35 < acc < 0.65


def test_probe_label_range_checked():
    x = torch.randn(10, 3)
    y = torch.arange(10) % 5
    with pytest.raises(EvalError, match="classifier has 3 outputs"):
        probe_features(x, y, x, y, ProbeConfig(epochs=1, num_classes=3))
    with pytest.raises(EvalError, match="epochs"):
        probe_features(x, y, x, y, ProbeConfig(epochs=0))


def test_probe_is_deterministic():
    g = torch.Generator().manual_seed(2)
    x = torch.randn(200, 6, generator=g)
    y = (x[:, 0] > 0).long()
    cfg = ProbeConfig(epochs=3, batch_size=16)
    assert probe_features(x, y, x, y, cfg) == probe_features(x, y, x, y, cfg)


@pytest.mark.parametrize("source, augment", [("backbone", False), ("projection", False), ("backbone", True)])
def test_linear_probe_leaves_encoder_unchanged(shapes, source, augment):
    train, test = shapes
    model = tiny_model()
    before = param_checksum(model)
    res = linear_probe(model, train, test, ProbeConfig(epochs=2, batch_size=16, feature_source=source, train_augmentation=augment))
    assert param_checksum(model) == before == res.encoder_checksum
    assert 0.0 <= res.accuracy <= 1.0


def test_linear_probe_needs_labels(shapes):
    train, test = shapes
    unlabeled = ImageDataset(train.images, None)
    with pytest.raises(EvalError, match="labeled"):
        linear_probe(tiny_model(), unlabeled, test, ProbeConfig(epochs=1))


# --- alignment --------------------------------------------------------------------


@given(st.integers(2, 12), st.integers(1, 6), st.integers(0, 1000))
@settings(max_examples=40, deadline=None)
def test_similarity_matrix_properties(n, d, seed):
    v = torch.randn(n, d, generator=torch.Generator().manual_seed(seed))
    sim, zero = cosine_similarity_matrix(v)
    assert sim.shape == (n, n)
    assert np.array_equal(sim, sim.T)
    assert np.all(np.diag(sim) == 1.0)
    assert sim.min() >= -1.0 and sim.max() <= 1.0
    assert zero == []


def test_zero_vectors_are_reported_and_excluded():
    v = torch.tensor([[1.0, 0.0], [0.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    sim, zero = cosine_similarity_matrix(v)
    assert zero == [1]
    owner = np.array([0, 0, 1, 1])
    intra, inter, _ = summarize_similarity(sim, owner, zero)
    assert intra == pytest.approx(np.sqrt(0.5))
    assert inter == pytest.approx(np.mean([np.sqrt(0.5), 0.0]))


def test_alignment_summary_known_values():
    # two examples x two views: same-example pairs 0.9, cross pairs 0.1
    sim = np.array([[1, 0.9, 0.1, 0.1], [0.9, 1, 0.1, 0.1], [0.1, 0.1, 1, 0.9], [0.1, 0.1, 0.9, 1]])
    intra, inter, collapse = summarize_similarity(sim, np.array([0, 0, 1, 1]))
    assert intra == pytest.approx(0.9) and inter == pytest.approx(0.1)
    assert collapse == pytest.approx((4 * 0.9 + 8 * 0.1) / 12)


def test_alignment_constant_encoder_is_collapsed():
    x = torch.rand(4, 3, 8, 8)
    rep = alignment_report(lambda v: torch.ones(v.shape[0], 5), x, SPEC, views=3)
    assert rep.collapse_score == pytest.approx(1.0)
    assert rep.alignment_gap == pytest.approx(0.0)
    assert rep.similarity_matrix.shape == (12, 12)


def test_alignment_invariant_encoder_has_full_gap():
    # an encoder that reads the example id from an untouched side channel is perfectly invariant
    ids = torch.eye(4)

    def enc(v):
        return ids.repeat_interleave(3, dim=0)

    rep = alignment_report(enc, torch.rand(4, 3, 8, 8), SPEC, views=3)
    assert rep.intra_mean == pytest.approx(1.0)
    assert rep.inter_mean == pytest.approx(0.0)
    assert rep.alignment_gap == pytest.approx(1.0)


def test_alignment_deterministic_and_validates():
    model = tiny_model()
    x = torch.rand(3, 3, 8, 8)
    a = alignment_report(model, x, SPEC, 4, RngState(5))
    b = alignment_report(model, x, SPEC, 4, RngState(5))
    assert np.array_equal(a.similarity_matrix, b.similarity_matrix)
    with pytest.raises(EvalError):
        alignment_report(model, x[:1], SPEC, 4)
    with pytest.raises(EvalError):
        alignment_report(model, x, SPEC, 1)


def test_eval_report_serializes(tmp_path):
    rep = alignment_report(lambda v: torch.randn(v.shape[0], 4), torch.rand(2, 3, 8, 8), SPEC, 2)
    path = EvalReport(0.5, [(10, 0.4), (20, 0.5)], rep, "abc").save(tmp_path / "r.json")
    import json

    d = json.loads(path.read_text())
    assert d["probe_accuracy"] == 0.5 and d["accuracy_curve"] == [[10, 0.4], [20, 0.5]]
    assert len(d["alignment"]["similarity_matrix"]) == 4


# --- ablation ---------------------------------------------------------------------


def test_default_sweeps():
    assert default_sweep("batch_size") == [128, 256, 512, 1024]
    assert default_sweep("latent_dim") == [64, 128, 256, 512]
    assert default_sweep("decoder_arch") == ["resnet18", "resnet34", "resnet50"]
    ls = default_sweep("logscale", 4, seed=0)
    assert len(ls) == 4 and all(-5 <= v <= 2 for v in ls)
    assert ls == default_sweep("logscale", 4, seed=0)


def test_apply_axis_does_not_mutate_base():
    base = TrainConfig()
    cfg = apply_axis(base, "logscale", -1.0)
    assert cfg.logscale_mode == "fixed" and cfg.fixed_logscale == -1.0
    assert base.logscale_mode == "learned"
    assert apply_axis(base, "latent_dim", 64).encoder.latent_dim == 64
    with pytest.raises(EvalError):
        apply_axis(base, "depth", 3)


def test_run_ablation_records_failures(tmp_path, shapes):
    train, test = shapes
    base = TrainConfig(
        objective=ObjectiveConfig("AE"),
        encoder=EncoderConfig(latent_dim=16, input_size=8, width=4, projection_hidden_dim=32),
        decoder=DecoderConfig(output_size=8, width=4),
        augmentation=SPEC, base_lr=1e-3, batch_size=16, base_batch_size=16, warmup_epochs=1, max_epochs=1, checkpoint_epochs=(),
    )
    # latent 64 exceeds the 32-dim backbone: that run must fail and be recorded
    rows = run_ablation(base, "latent_dim", [16, 64], train, train, test, ProbeConfig(epochs=1), tmp_path, seeds=[0, 1])
    assert len(rows) == 4
    assert [r["status"] == "ok" for r in rows] == [True, True, False, False]
    csv_rows = read_ablation_csv(tmp_path / "ablation.csv")
    assert list(csv_rows[0]) == ["axis", "value", "probe_accuracy", "epochs", "seed", "status"]
    assert csv_rows[2]["probe_accuracy"] == ""
    assert (tmp_path / "ablation.png").stat().st_size > 0


def test_accuracy_spread():
    rows = [
        {"value": 64, "probe_accuracy": 0.50},
        {"value": 64, "probe_accuracy": 0.54},
        {"value": 128, "probe_accuracy": 0.55},
        {"value": 128, "probe_accuracy": None},
    ]
    assert accuracy_spread(rows) == pytest.approx(0.03)


def test_similarity_matches_brute_force():
    # M=3 examples, V=2 views of random representation vectors
    rng = np.random.default_rng(0)
    vecs = rng.standard_normal((6, 5))
    sim, _ = cosine_similarity_matrix(torch.from_numpy(vecs))
    for i in range(6):
        for j in range(6):
            a, b = vecs[i], vecs[j]
            ref = sum(x * y for x, y in zip(a, b)) / (sum(x * x for x in a) ** 0.5 * sum(y * y for y in b) ** 0.5)
            assert sim[i, j] == pytest.approx(ref, abs=1e-12)


def test_run_ablation_reproducible(shapes):
    train, test = shapes
    base = TrainConfig(
        objective=ObjectiveConfig("AASAE"),
        encoder=EncoderConfig(latent_dim=16, input_size=8, width=4, projection_hidden_dim=32),
        decoder=DecoderConfig(output_size=8, width=4),
        augmentation=SPEC, base_lr=1e-3, batch_size=16, base_batch_size=16, warmup_epochs=1, max_epochs=1, checkpoint_epochs=(),
    )
    a = run_ablation(base, "batch_size", [8, 16], train, train, test, ProbeConfig(epochs=2))
    b = run_ablation(base, "batch_size", [8, 16], train, train, test, ProbeConfig(epochs=2))
    assert a == b
