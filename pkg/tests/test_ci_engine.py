import math
from dataclasses import replace

import numpy as np
import pytest
import torch
from scipy import stats

from fairci import ci_engine as ce
from fairci import nets, synthgen
from fairci.errors import InvalidParameterError

from conftest import central_fd_check, tiny_encoder

LOG_HALF2 = 2 * math.log(0.5)


def _gen(seed=0):
    return torch.Generator().manual_seed(seed)


# -- sampler ------------------------------------------------------------------------

@pytest.mark.exactness
def test_singleton_label_resamples_itself():
    v = torch.randn(5, 3)
    y = torch.tensor([0, 0, 1, 0, 0])
    out = ce.dynamic_sample(v, y, _gen())
    assert torch.equal(out[2], v[2])


@pytest.mark.exactness
def test_sampler_support_containment():
    g = _gen(1)
    v = torch.randn(40, 4)
    y = torch.randint(0, 2, (40,), generator=g)
    for _ in range(50):
        out = ce.dynamic_sample(v, y, g)
        for i in range(40):
            same = (v == out[i]).all(dim=1) & (y == y[i])
            assert same.any()


@pytest.mark.exactness
def test_sampler_is_detached():
    v = torch.randn(6, 2, requires_grad=True)
    out = ce.dynamic_sample(v, torch.tensor([0, 1, 0, 1, 0, 1]), _gen())
    assert not out.requires_grad


@pytest.mark.exactness
def test_sampler_uniform_frequency():
    k = 10
    g = _gen(2)
    y = torch.zeros(k, dtype=torch.long)
    counts = np.zeros(k)
    for _ in range(10_000):
        counts += np.bincount(ce.resample_indices(y, g).numpy(), minlength=k)
    assert counts.sum() == 100_000
    assert stats.chisquare(counts).pvalue > 0.01


@pytest.mark.exactness
def test_label_space_sampler():
    g = _gen(3)
    logits = torch.tensor([0.5, -1.0, 2.0, 3.0, -0.2])
    y = torch.tensor([1, 0, 1, 1, 0])
    assert ce.label_space_sample(logits[:1], y[:1], g).item() == 0.5
    for _ in range(20):
        out = ce.label_space_sample(logits, y, g)
        assert out.shape == logits.shape
        for i in range(5):
            assert out[i].item() in logits[y == y[i]].tolist()


@pytest.mark.exactness
def test_label_space_sampler_frequency():
    g = _gen(4)
    logits = torch.arange(8, dtype=torch.float32)
    y = torch.tensor([0, 1] * 4)
    counts = np.zeros(8)
    for _ in range(5000):
        out = ce.label_space_sample(logits, y, g)
        counts += np.bincount(out.long().numpy(), minlength=8)
    for label in (0, 1):
        assert stats.chisquare(counts[label::2]).pvalue > 0.01


def test_sampler_empty_batch():
    with pytest.raises(InvalidParameterError):
        ce.dynamic_sample(torch.empty(0, 3), torch.empty(0, dtype=torch.long), _gen())


# -- discriminator losses ------------------------------------------------------------

def _const_disc(dim, p=0.5, dtype=torch.float64):
    d = nets.init_discriminator(dim, 0, hidden=8, dtype=dtype)
    with torch.no_grad():
        d.output_layer.weight.zero_()
        d.output_layer.bias.fill_(math.log(p / (1 - p)))
    return d


@pytest.mark.exactness
def test_loss_d_constant_half():
    u, uf = torch.randn(6, 3), torch.randn(6, 3)
    y = torch.tensor([0, 1, 0, 1, 1, 0])
    s = torch.rand(6)
    assert ce.loss_d1(_const_disc(4), u, uf, y).item() == pytest.approx(LOG_HALF2, abs=1e-12)
    assert ce.loss_d2(_const_disc(5), u, uf, s, y).item() == pytest.approx(LOG_HALF2, abs=1e-12)


@pytest.mark.exactness
def test_loss_d_extreme_confidence():
    # route by a marker feature: real rows carry +1e3, fake rows -1e3
    d = nets.init_discriminator(2, 0, hidden=4, dtype=torch.float64)
    with torch.no_grad():
        for p in d.parameters():
            p.zero_()
        d.net[0].weight[:, 0] = 1.0
        d.net[2].weight.fill_(1.0)
        d.output_layer.weight.fill_(1.0)
    real = torch.full((4, 1), 1e3, dtype=torch.float64)
    fake = torch.full((4, 1), -1e3, dtype=torch.float64)
    y = torch.tensor([0, 1, 0, 1])
    val = ce.loss_d1(d, real, fake, y).item()
    assert val == pytest.approx(2 * math.log(1 - 1e-6), rel=1e-9)
    assert val < 0


def _independent_d1(d, real, fake, y):
    y = y.double().reshape(-1, 1)
    pr = [d(torch.cat([real[i:i + 1], y[i:i + 1]], 1)).item() for i in range(len(y))]
    pf = [d(torch.cat([fake[i:i + 1], y[i:i + 1]], 1)).item() for i in range(len(y))]
    return sum(math.log(1 - p) for p in pf) / len(pf) + sum(math.log(p) for p in pr) / len(pr)


def test_loss_d1_matches_recomputation():
    g = torch.Generator().manual_seed(7)
    d = nets.init_discriminator(4, 3, hidden=16, dtype=torch.float64)
    real = torch.randn(9, 3, generator=g, dtype=torch.float64)
    fake = torch.randn(9, 3, generator=g, dtype=torch.float64)
    y = torch.randint(0, 2, (9,), generator=g)
    got = ce.loss_d1(d, real, fake, y).item()
    assert got == pytest.approx(_independent_d1(d, real, fake, y), rel=1e-12)


def test_loss_d2_matches_recomputation():
    g = torch.Generator().manual_seed(8)
    d = nets.init_discriminator(5, 4, hidden=16, dtype=torch.float64)
    real = torch.randn(9, 3, generator=g, dtype=torch.float64)
    fake = torch.randn(9, 3, generator=g, dtype=torch.float64)
    s = torch.rand(9, generator=g, dtype=torch.float64)
    y = torch.randint(0, 2, (9,), generator=g)
    got = ce.loss_d2(d, real, fake, s, y).item()
    # D2 on [u, s, y] equals a D1-style evaluation on [u, s] with y appended
    expected = _independent_d1(d, torch.cat([real, s[:, None]], 1), torch.cat([fake, s[:, None]], 1), y)
    assert got == pytest.approx(expected, rel=1e-12)


def test_loss_d_length_mismatch():
    with pytest.raises(InvalidParameterError):
        ce.loss_d1(_const_disc(4), torch.randn(3, 3), torch.randn(4, 3), torch.zeros(3))
    with pytest.raises(InvalidParameterError):
        ce.loss_d2(_const_disc(5), torch.randn(3, 3), torch.randn(3, 3), torch.zeros(2), torch.zeros(3))


# -- scalar loss algebra ---------------------------------------------------------------

@pytest.mark.exactness
def test_loss_ci_cases():
    assert ce.loss_ci(-1.3863, -1.3863) == 0
    assert ce.loss_ci(-1.0, -0.5) == pytest.approx(0.25)
    assert ce.loss_ci(LOG_HALF2, LOG_HALF2) == 0.0


@pytest.mark.exactness
def test_loss_ci_nonnegative_and_zero_iff_equal():
    rng = np.random.default_rng(0)
    for a, b in rng.normal(size=(200, 2)):
        v = ce.loss_ci(a, b)
        assert v >= 0
        assert (v == 0) == (a == b)


@pytest.mark.exactness
def test_encoder_loss_cases():
    cfg = ce.TrainingConfig(ci_target="latent_space", lambda_ci=0.0)
    assert ce.encoder_loss(cfg, 0.25, 0.7) == 0.7
    cfg = ce.TrainingConfig(ci_target="latent_space", lambda_ci=2.0, task_weight=1.0)
    assert ce.encoder_loss(cfg, 0.25, 0.7) == pytest.approx(1.2)
    cfg = ce.TrainingConfig(ci_target="partitioned", lambda_ci=1.0, lambda_s=0.5)
    assert ce.encoder_loss(cfg, 0.1, 0.6, 0.4) == pytest.approx(0.9)
    cfg = ce.TrainingConfig(ci_target="none", lambda_ci=5.0)
    assert ce.encoder_loss(cfg, 0.3, 0.6) == 0.6


def test_encoder_loss_negative_weight():
    with pytest.raises(InvalidParameterError):
        ce.encoder_loss(ce.TrainingConfig(ci_target="latent_space", lambda_ci=-1.0), 0.1, 0.2)


@pytest.mark.exactness
def test_discriminator_loss_cases():
    assert ce.discriminator_loss(-1.3863, -1.3863) == pytest.approx(-2.7726)
    assert ce.discriminator_loss(0.0, -0.3) == -0.3
    eps = 1e-6
    perfect = 2 * math.log(1 - eps)
    assert -1e-5 < ce.discriminator_loss(perfect, perfect) < 0


def test_regularizer_zero_gaps_is_bce():
    p = torch.tensor([0.8, 0.8, 0.3, 0.3], dtype=torch.float64)
    y = torch.tensor([1, 1, 0, 0])
    g = torch.tensor([0, 1, 0, 1])
    bce = torch.nn.functional.binary_cross_entropy(p, y.double())
    assert ce.regularizer_loss(3.0, p, y, g).item() == pytest.approx(bce.item(), abs=1e-15)


@pytest.mark.exactness
def test_regularizer_hand_case():
    p = torch.tensor([0.9, 0.7, 0.2, 0.2], dtype=torch.float64)
    y = torch.tensor([1, 1, 0, 0])
    g = torch.tensor([0, 1, 0, 1])
    bce = torch.nn.functional.binary_cross_entropy(p, y.double()).item()
    assert ce.regularizer_loss(2.0, p, y, g).item() == pytest.approx(0.4 + bce)
    assert ce.regularizer_loss(0.0, p, y, g).item() == pytest.approx(bce)


def test_regularizer_empty_cell_contributes_zero():
    p = torch.tensor([0.9, 0.7, 0.2], dtype=torch.float64)
    gaps = ce.rate_gaps(p, torch.tensor([1, 1, 0]), torch.tensor([0, 1, 0]))
    assert gaps[0].item() == 0.0
    assert gaps[1].item() == pytest.approx(0.2)


# -- gradient contracts -------------------------------------------------------------------

def _setup(ci_target, lam=1.5, seed=0):
    enc = tiny_encoder(seed, partitioned=ci_target == "partitioned", split_index=6)
    cfg = ce.TrainingConfig(ci_target=ci_target, lambda_ci=lam, lambda_s=0.7, split_index=6)
    if ci_target in ce.ADVERSARIAL_TARGETS:
        d1_dim, d2_dim = nets.disc_input_dims(ci_target, enc.arch)
        d1 = nets.init_discriminator(d1_dim, 11, hidden=8, dtype=torch.float64)
        d2 = nets.init_discriminator(d2_dim, 12, hidden=8, dtype=torch.float64)
    else:
        d1 = d2 = None
    # zero-initialised biases leave the tiny encoder dead and park ReLU inputs on kinks
    gen = _gen(100 + seed)
    with torch.no_grad():
        for net in (enc, d1, d2):
            for name, p in ([] if net is None else net.named_parameters()):
                if name.endswith("bias"):
                    p.copy_(0.1 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return cfg, enc, d1, d2


@pytest.mark.gradcheck
@pytest.mark.parametrize("ci_target", ["latent_space", "label_space", "partitioned",
                                       "regularizer", "none"])
def test_encoder_loss_gradient_matches_fd(ci_target, tiny_batch):
    x, y, s = tiny_batch
    cfg, enc, d1, d2 = _setup(ci_target)
    params = list(enc.parameters())
    assert sum(p.numel() for p in params) <= 1000
    fake = None
    if ci_target in ce.ADVERSARIAL_TARGETS:
        # resampled values are constants of the loss; freeze them at the base point
        with torch.no_grad():
            u = ce.ci_representation(enc, enc(x), ci_target)
        fake = u[ce.resample_indices(y, _gen(5))]
    loss = lambda: ce.batch_losses(cfg, enc, d1, d2, x, y, s, fake=fake).l_total
    assert loss().item() > 0
    assert central_fd_check(loss, params) < 1e-4


@pytest.mark.gradcheck
@pytest.mark.parametrize("norm", ce.DISC_INPUT_NORMS)
def test_encoder_loss_gradient_matches_fd_per_input_norm(norm, tiny_batch):
    x, y, s = tiny_batch
    cfg, enc, d1, d2 = _setup("latent_space")
    cfg = replace(cfg, disc_input_norm=norm)
    with torch.no_grad():
        fake = enc(x).latent[ce.resample_indices(y, _gen(5))]
    loss = lambda: ce.batch_losses(cfg, enc, d1, d2, x, y, s, fake=fake).l_total
    assert central_fd_check(loss, list(enc.parameters())) < 1e-4


@pytest.mark.gradcheck
@pytest.mark.parametrize("ci_target", ["latent_space", "label_space", "partitioned"])
def test_discriminator_loss_gradient_matches_fd(ci_target, tiny_batch):
    x, y, s = tiny_batch
    cfg, enc, d1, d2 = _setup(ci_target)
    idx = ce.resample_indices(y, _gen(6))
    params = list(d1.parameters()) + list(d2.parameters())
    assert sum(p.numel() for p in params) <= 1000

    def loss():
        t = ce.batch_losses(cfg, enc, d1, d2, x, y, s, resample_idx=idx)
        return -ce.discriminator_loss(t.l_d1, t.l_d2)

    assert central_fd_check(loss, params) < 1e-4


def test_resampled_branch_carries_no_encoder_gradient(tiny_batch):
    x, y, s = tiny_batch
    cfg, enc, d1, d2 = _setup("latent_space")
    out = enc(x)
    u_fake = ce.dynamic_sample(out.latent, y, _gen(7))
    fake_term = torch.log1p(-d1(torch.cat([u_fake, y.double()[:, None]], 1))).mean()
    assert not fake_term.requires_grad or all(
        g is None for g in torch.autograd.grad(fake_term, list(enc.parameters()), allow_unused=True)
    )
    # zeroing the resampled values leaves the encoder gradient of L_D1 unchanged
    idx = ce.resample_indices(y, _gen(8))

    def grads(fake):
        l1 = ce.loss_d1(d1, enc(x).latent, fake, y)
        return torch.autograd.grad(l1, list(enc.parameters()), allow_unused=True)

    real_fake = enc(x).latent.detach()[idx]
    for ga, gb in zip(grads(real_fake), grads(torch.zeros_like(real_fake))):
        if ga is None:
            assert gb is None
        else:
            assert torch.equal(ga, gb)


# -- config ---------------------------------------------------------------------------------

@pytest.mark.parametrize("field,value", [
    ("ci_target", "bogus"), ("lambda_ci", -1.0), ("lambda_s", -0.1), ("task_weight", 0.0),
    ("learning_rate", 0.0), ("batch_size", 0), ("epochs", -1), ("disc_steps_per_enc_step", 0),
    ("aux_loss", "l1"),
])
def test_config_validation_names_field(field, value):
    cfg = ce.TrainingConfig(ci_target="latent_space", lambda_ci=1.0)
    setattr(cfg, field, value)
    with pytest.raises(InvalidParameterError, match=field):
        cfg.validate()


def test_config_batch_size_for_sampling():
    with pytest.raises(InvalidParameterError, match="batch_size"):
        ce.TrainingConfig(ci_target="latent_space", batch_size=1).validate()
    ce.TrainingConfig(ci_target="none", batch_size=1).validate()


def test_config_roundtrip():
    cfg = ce.TrainingConfig(ci_target="partitioned", lambda_ci=2.0, split_index=7)
    assert ce.TrainingConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(InvalidParameterError):
        ce.TrainingConfig.from_dict({"nonsense": 1})


# -- training loop --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_data():
    return synthgen.generate_dataset(64, "train", 0), synthgen.generate_dataset(32, "val", 1)


def _state(enc):
    return {k: v.clone() for k, v in enc.state_dict().items()}


def test_lambda_zero_equivalence(small_data):
    tr, va = small_data
    base = dict(epochs=2, batch_size=16, seed=4)
    enc_a, _ = ce.train(ce.TrainingConfig(ci_target="none", **base), tr)
    enc_b, hist_b = ce.train(ce.TrainingConfig(ci_target="latent_space", lambda_ci=0.0, **base), tr)
    sa, sb = _state(enc_a), _state(enc_b)
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert hist_b.column("l_d1")[0] != 0.0  # discriminators did run


def test_train_deterministic_and_history(small_data):
    tr, va = small_data
    cfg = ce.TrainingConfig(ci_target="latent_space", lambda_ci=5.0, epochs=2, batch_size=16, seed=1)
    enc_a, h_a = ce.train(cfg, tr, va)
    enc_b, h_b = ce.train(cfg, tr, va)
    sa, sb = _state(enc_a), _state(enc_b)
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert h_a.epochs == h_b.epochs
    assert len(h_a.epochs) == 2
    row = h_a.epochs[0]
    for key in ("epoch", "l_d1", "l_d2", "l_ci", "l_task", "val_bacc", "val_dcor2"):
        assert key in row
    assert row["l_ci"] >= 0


def test_nonzero_lambda_changes_trajectory(small_data):
    tr, _ = small_data
    base = dict(epochs=1, batch_size=16, seed=2)
    enc_a, _ = ce.train(ce.TrainingConfig(ci_target="none", **base), tr)
    enc_b, _ = ce.train(ce.TrainingConfig(ci_target="latent_space", lambda_ci=50.0, **base), tr)
    assert not torch.equal(enc_a.to_latent.weight, enc_b.to_latent.weight)


def test_missing_label_batch_skips_ci_and_warns():
    ds = synthgen.generate_dataset(16, "train", 3)
    ones = ds.subset(np.flatnonzero(ds.label == 1))
    cfg = ce.TrainingConfig(ci_target="latent_space", lambda_ci=1.0, epochs=1, batch_size=4)
    _, hist = ce.train(cfg, ones)
    assert len(hist.warnings) == 2
    assert hist.warnings[0]["event"] == "missing_label_class"
    assert hist.epochs[0]["l_ci"] == 0.0


@pytest.mark.parametrize("ci_target", ["regularizer", "label_space", "partitioned"])
def test_variants_train(ci_target, small_data):
    tr, va = small_data
    cfg = ce.TrainingConfig(ci_target=ci_target, lambda_ci=1.0, epochs=1, batch_size=32)
    enc, hist = ce.train(cfg, tr, va)
    rep = ce.evaluate(enc, va)
    assert 0 <= rep.bacc <= 1
    if ci_target == "partitioned":
        assert {"dcor2_invariant", "dcor2_variant"} <= set(rep.extra)
        assert hist.epochs[0]["l_aux"] > 0


def test_stratified_batches_balance():
    labels = np.array([0] * 60 + [1] * 40)
    batches = ce._batches(labels, 10, np.random.default_rng(0), stratified=True)
    assert sorted(np.concatenate(batches).tolist()) == list(range(100))
    for b in batches:
        assert labels[b].sum() == 4
