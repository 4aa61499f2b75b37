import math

import numpy as np
import pytest

from fairsvdd.data import DataError, Dataset, SynthSpec, standardize, synth_biased
from fairsvdd.fair import (
    LOGIT_CLAMP,
    FairSvddModel,
    adv_loss,
    adversarial_grads,
    disc_forward,
    disc_grads,
    disc_loss,
    disc_loss_from_logits,
    disc_predict,
    disc_step,
    export_trace,
    init_discriminator,
    load_fair,
    probe_accuracy,
    sigmoid,
    train_fair_svdd,
)
from fairsvdd.nn import AdamState, finite_diff_grads, init_dense, max_relative_error, predict
from fairsvdd.svdd import TrainConfig, score, svdd_loss, train_svdd


def synth(n=200, seed=0, **kw):
    train, test = synth_biased(SynthSpec(n_per_group=n, seed=seed, **kw))
    (train, test), _ = standardize(train, [test])
    return train, test


def tiny_config(**kw):
    base = dict(pretrain_epochs=3, adversarial_epochs=4, disc_hidden=[8, 8], seed=1)
    return TrainConfig(**{**base, **kw})


# -- sigmoid / discriminator outputs -------------------------------------------


def test_sigmoid_values():
    assert sigmoid(np.array([0.0]))[0] == 0.5
    with np.errstate(all="raise"):
        out = sigmoid(np.array([-500.0, 500.0]))
    assert np.all(np.isfinite(out)) and 0.0 <= out[0] < 1e-200 and out[1] == 1.0


def test_sigmoid_vs_independent_formula():
    x = np.random.default_rng(0).uniform(-30, 30, size=200)
    np.testing.assert_allclose(sigmoid(x), 0.5 * (1 + np.tanh(x / 2)), rtol=0, atol=1e-12)


@pytest.mark.parametrize("norm", [False, True])
def test_disc_predict_range_and_shape(norm):
    rng = np.random.default_rng(1)
    disc = init_discriminator(3, [4], rng, input_norm=norm)
    p = disc_predict(disc, rng.normal(size=(6, 3)) * 100)
    assert p.shape == (6,) and np.all((p >= 0) & (p <= 1))
    with pytest.raises(ValueError):
        disc_predict(disc, np.zeros((2, 4)))


# -- losses ----------------------------------------------------------------------


def test_disc_loss_half():
    assert disc_loss(np.full(4, 0.5), [0, 1, 1, 0]) == pytest.approx(math.log(2), abs=1e-12)


def test_disc_loss_hand_example():
    expected = -(math.log(0.9) + math.log(0.8)) / 2
    assert disc_loss(np.array([0.9, 0.2]), [1, 0]) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.164252, abs=1e-6)


def test_disc_loss_perfect_prediction():
    loss, grad = disc_loss_from_logits(np.array([40.0, -40.0]), [1, 0])
    assert loss < 1e-6
    assert disc_loss(np.array([1.0, 0.0]), [1, 0]) < 1e-6


def test_disc_loss_clamp_does_not_mutate_and_zeroes_gradient():
    logits = np.array([100.0, -3.0])
    loss, grad = disc_loss_from_logits(logits, [0, 1])
    assert logits[0] == 100.0
    assert loss == pytest.approx((LOGIT_CLAMP + math.log1p(math.exp(-LOGIT_CLAMP)) + math.log1p(math.exp(3.0))) / 2)
    assert grad[0] == 0.0 and grad[1] != 0.0


def test_disc_loss_errors():
    with pytest.raises(ValueError):
        disc_loss(np.array([0.5, 0.5]), [1])
    with pytest.raises(ValueError):
        disc_loss(np.array([0.5]), [2])


def test_adv_loss():
    assert adv_loss(1.3, 0.4, 0.0) == 1.3
    assert adv_loss(1.0, 0.5, 2.0) == 0.0
    with pytest.raises(ValueError):
        adv_loss(1.0, 1.0, -1.0)
    assert TrainConfig().lambda_fair == 1.0


# -- gradients through the composed stack -------------------------------------------


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("norm", [False, True])
def test_adversarial_gradient_vs_finite_differences(seed, norm):
    rng = np.random.default_rng(seed)
    enc = init_dense([3, 5, 3], rng)
    disc = init_discriminator(3, [4, 3], rng, input_norm=norm)
    x = rng.normal(size=(10, 3))
    z = np.array([0, 1] * 5, dtype=float)
    c = rng.normal(size=3)
    alpha, lam = 0.01, 1.7

    def l_d():
        return disc_loss_from_logits(disc_forward(disc, predict(enc, x))[0], z)[0]

    def l_adv():
        return svdd_loss(enc, x, c, alpha) - lam * l_d()

    _, _, g = adversarial_grads(enc, disc, x, z, c, alpha, lam)
    assert max_relative_error(g, finite_diff_grads(l_adv, enc.params())) < 1e-4
    _, gd, _ = disc_grads(disc, predict(enc, x), z)
    assert max_relative_error(gd, finite_diff_grads(l_d, disc.net.params())) < 1e-4


def test_gradient_sign_convention():
    rng = np.random.default_rng(3)
    enc = init_dense([3, 4, 2], rng)
    disc = init_discriminator(2, [3], rng, input_norm=False)
    x, z, c = rng.normal(size=(6, 3)), np.array([0, 1] * 3, float), np.ones(2)
    _, _, g0 = adversarial_grads(enc, disc, x, z, c, 0.0, 0.0)
    _, _, g1 = adversarial_grads(enc, disc, x, z, c, 0.0, 1.0)
    _, _, g2 = adversarial_grads(enc, disc, x, z, c, 0.0, 2.0)
    # linear in lambda: g(2) - g(1) == g(1) - g(0) == -dL_D/dtheta
    for a, b, d in zip(g0, g1, g2):
        np.testing.assert_allclose(d - b, b - a, atol=1e-12)


def test_disc_step_lowers_loss_on_separable_embeddings():
    rng = np.random.default_rng(4)
    emb = np.r_[rng.normal(-1, 0.3, size=(50, 2)), rng.normal(1, 0.3, size=(50, 2))]
    z = np.r_[np.zeros(50), np.ones(50)]
    disc = init_discriminator(2, [8], rng)
    opt = AdamState.for_params(disc.net.params(), lr=1e-2)
    first = disc_step(disc, opt, emb, z)
    for _ in range(200):
        last = disc_step(disc, opt, emb, z)
    assert last < first * 0.2
    assert np.mean((disc_predict(disc, emb) > 0.5) == z) > 0.95


# -- training schedule ---------------------------------------------------------------


def test_lambda_zero_reduces_to_plain_svdd():
    train, _ = synth(300)
    cfg = tiny_config(lambda_fair=0.0)
    fair = train_fair_svdd(train, cfg)
    plain = train_svdd(train, cfg, epochs=cfg.pretrain_epochs + cfg.adversarial_epochs)
    for a, b in zip(fair.encoder.params(), plain.encoder.params()):
        assert a.tobytes() == b.tobytes()
    assert fair.center.tobytes() == plain.center.tobytes()


def test_trace_layout():
    train, _ = synth(200)
    cfg = tiny_config()
    m = train_fair_svdd(train, cfg)
    phases = [r.phase for r in m.trace]
    assert phases == ["pretrain"] * 3 + ["disc_init"] * 3 + ["adversarial"] * 4
    assert [r.epoch for r in m.trace if r.phase == "adversarial"] == [1, 2, 3, 4]
    for r in m.trace:
        vals = [v for v in (r.l_svdd, r.l_d, r.l_adv) if v is not None]
        assert vals and all(np.isfinite(vals))
    adv = [r for r in m.trace if r.phase == "adversarial"]
    assert all(r.l_adv == pytest.approx(r.l_svdd - cfg.lambda_fair * r.l_d) for r in adv)


def test_debug_checks_pass_and_training_deterministic():
    train, _ = synth(200)
    a = train_fair_svdd(train, tiny_config(debug_checks=True))
    b = train_fair_svdd(train, tiny_config())
    assert a.encoder.checksum() == b.encoder.checksum()
    assert a.discriminator.checksum() == b.discriminator.checksum()
    assert [vars(r) for r in a.trace] == [vars(r) for r in b.trace]


def test_encoder_fights_back_in_adversarial_phase():
    # default generator and schedule, fixed seed
    train, _ = synth(1000, seed=0)
    m = train_fair_svdd(train, TrainConfig(seed=0))
    phase2_min = min(r.l_d for r in m.trace if r.phase == "disc_init")
    phase3 = [r.l_d for r in m.trace if r.phase == "adversarial"]
    assert np.mean(phase3[-5:]) > phase2_min + 0.1


def test_single_group_rejected():
    ds = Dataset(np.random.default_rng(0).normal(size=(20, 3)), np.zeros(20, int))
    with pytest.raises(DataError):
        train_fair_svdd(ds, tiny_config())


def test_scoring_ignores_discriminator(tmp_path):
    train, test = synth(200)
    m = train_fair_svdd(train, tiny_config())
    before = m.score(test)
    np.testing.assert_array_equal(before, score(m.svdd, test))
    for p in m.discriminator.net.params():
        p += 1.0
    np.testing.assert_array_equal(m.score(test), before)


def test_checkpoint_round_trip(tmp_path):
    train, test = synth(200)
    m = train_fair_svdd(train, tiny_config())
    m.save(tmp_path / "f.json")
    back = load_fair(tmp_path / "f.json")
    assert isinstance(back, FairSvddModel)
    np.testing.assert_array_equal(back.score(test), m.score(test))
    emb = m.embed(test)
    np.testing.assert_array_equal(disc_predict(back.discriminator, emb), disc_predict(m.discriminator, emb))
    assert [vars(r) for r in back.trace] == [vars(r) for r in m.trace]
    back.save(tmp_path / "g.json")
    assert (tmp_path / "f.json").read_bytes() == (tmp_path / "g.json").read_bytes()


def test_export_trace(tmp_path):
    train, _ = synth(100)
    m = train_fair_svdd(train, tiny_config())
    export_trace(m.trace, tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "epoch,phase,l_svdd,l_d,l_adv"
    assert len(lines) == 1 + len(m.trace)
    assert lines[1].startswith("1,pretrain,") and lines[1].endswith(",,")


# -- probe ---------------------------------------------------------------------------


def test_probe_detects_signal_and_its_absence():
    rng = np.random.default_rng(0)
    z = np.r_[np.zeros(300, int), np.ones(300, int)]
    informative = rng.normal(size=(600, 4)) + 2.0 * z[:, None]
    noise = rng.normal(size=(600, 4))
    assert probe_accuracy(informative, z, epochs=30) > 0.9
    assert abs(probe_accuracy(noise, z, epochs=30) - 0.5) < 0.08
