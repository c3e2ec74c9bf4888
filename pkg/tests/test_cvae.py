import math

import numpy as np
import pytest
from scipy import stats

from ensboost.cvae import (CvaeModel, TrainConfig, decode_mean, elbo_loss, embed_condition,
                           encode, evaluate, kl_diag_gaussian, load_checkpoint, loss_and_grads,
                           reparameterize, save_checkpoint, train)
from ensboost.data import (SyntheticConfig, fit_normalizer, generate_synthetic_ensemble,
                           standardize)
from ensboost.errors import FormatError, ShapeError
from ensboost.nn_core import forward, make_rng

from conftest import tiny_model


def test_default_architecture():
    m = CvaeModel.init(20, make_rng(0))
    assert m.latent_dim == 500 and m.condition_dim == 2
    assert m.condition_net.sizes == [20, 64, 16, 2]
    assert m.encoder.sizes == [22, 1024, 512, 1000]
    assert m.decoder.sizes == [502, 512, 1024, 20]


def test_embedding_is_bias_with_zero_final_weights(tiny):
    last = tiny.condition_net.layers[-1]
    last.weight[:] = 0.0
    c = embed_condition(tiny, make_rng(1).standard_normal((5, 12)))
    assert c.shape == (5, 2)
    assert np.all(c == last.bias)


def test_embedding_deterministic(tiny):
    x = np.tile(make_rng(2).standard_normal((1, 12)), (2, 1))
    c = embed_condition(tiny, x)
    assert np.array_equal(c[0], c[1])
    with pytest.raises(ShapeError):
        embed_condition(tiny, np.ones((2, 11)))


def test_encode_clamps_log_sigma(tiny):
    last = tiny.encoder.layers[-1]
    last.weight[:] = 0.0
    last.bias[:3] = 0.25
    last.bias[3:] = [50.0, -50.0, 0.0]
    mu, sigma = encode(tiny, np.ones((4, 12)), np.zeros((4, 2)))
    assert mu.shape == (4, 3) and np.all(mu == 0.25)
    assert np.all(sigma[:, 0] == math.exp(10.0))
    assert np.all(sigma[:, 1] == math.exp(-10.0))
    assert np.all(sigma[:, 2] == 1.0)


def test_encode_is_positive_and_order_preserving(tiny):
    x = make_rng(3).standard_normal((6, 12))
    c = embed_condition(tiny, x)
    mu, sigma = encode(tiny, x, c)
    assert np.all(sigma > 0)
    mu_rev, _ = encode(tiny, x[::-1], c[::-1])
    assert np.array_equal(mu_rev, mu[::-1])


def test_reparameterize_limits():
    mu = np.array([[1.0, -2.0]])
    assert np.array_equal(reparameterize(mu, np.zeros((1, 2)), make_rng(0)), mu)
    eps = np.array([[0.5, 0.5]])
    a = reparameterize(mu, np.ones((1, 2)), eps=eps)
    b = reparameterize(mu + 3.0, np.ones((1, 2)), eps=eps)
    assert np.array_equal(b - a, np.full((1, 2), 3.0))


def test_reparameterize_moments():
    n = 10 ** 5
    mu = np.full((n, 2), [0.7, -1.5])
    sigma = np.full((n, 2), [0.3, 2.0])
    z = reparameterize(mu, sigma, make_rng(4))
    se_mean = sigma[0] / math.sqrt(n)
    se_var = sigma[0] ** 2 * math.sqrt(2.0 / (n - 1))
    assert np.all(np.abs(z.mean(0) - mu[0]) < 4 * se_mean)
    assert np.all(np.abs(z.var(0, ddof=1) - sigma[0] ** 2) < 4 * se_var)


def test_kl_examples():
    assert kl_diag_gaussian(np.zeros((1, 5)), np.ones((1, 5)))[0] == 0.0
    assert kl_diag_gaussian([[1.0]], [[1.0]])[0] == 0.5
    expected = 0.5 * (4.0 - 1.0 - math.log(4.0))
    assert math.isclose(kl_diag_gaussian([[0.0]], [[2.0]])[0], expected, rel_tol=1e-15)
    assert abs(expected - 0.8069) < 1e-4


def test_kl_monte_carlo_cross_check():
    z = 2.0 * make_rng(5).standard_normal(10 ** 6)
    log_ratio = stats.norm.logpdf(z, 0, 2) - stats.norm.logpdf(z)
    se = log_ratio.std() / math.sqrt(len(z))
    assert abs(log_ratio.mean() - kl_diag_gaussian([[0.0]], [[2.0]])[0]) < 4 * se


def test_decode_mean_properties(tiny):
    z = make_rng(6).standard_normal((3, 3))
    c = make_rng(7).standard_normal((3, 2))
    out = decode_mean(tiny, np.vstack([z, z]), np.vstack([c, c]))
    assert out.shape == (6, 12)
    assert np.array_equal(out[:3], out[3:])
    tiny.decoder.layers[-1].weight[:] = 0.0
    assert np.all(decode_mean(tiny, z, c) == tiny.decoder.layers[-1].bias)


def test_loss_beta_zero_is_mse(tiny):
    x = make_rng(8).standard_normal((7, 12))
    eps = make_rng(9).standard_normal((7, 3))
    loss, recon, kl = elbo_loss(tiny, x, 0.0, eps=eps)
    assert loss == recon
    assert kl >= 0
    loss1, recon1, kl1 = elbo_loss(tiny, x, 1.0, eps=eps)
    assert math.isclose(loss1, recon + kl / 12, rel_tol=1e-14)


def test_perfect_autoencoder_has_zero_loss():
    """Hand-wired model: c=0, mu=0, sigma=1, decoder copies x through a skip-free path.

    The decoder cannot see x, so use a batch where every row equals the decoder bias.
    """
    m = tiny_model()
    for net in (m.condition_net, m.encoder):
        net.layers[-1].weight[:] = 0.0
        net.layers[-1].bias[:] = 0.0
    target = make_rng(10).standard_normal(12)
    m.decoder.layers[-1].weight[:] = 0.0
    m.decoder.layers[-1].bias[:] = target
    loss, recon, kl = elbo_loss(m, np.tile(target, (4, 1)), 1.0, rng=make_rng(0))
    assert loss == 0.0 and recon == 0.0 and kl == 0.0


@pytest.mark.parametrize("beta", [0.0, 0.4, 1.0])
def test_gradient_matches_finite_differences(beta):
    m = tiny_model(seed=1)
    r = make_rng(11)
    x = r.standard_normal((6, 12))
    eps = r.standard_normal((6, 3))
    _, _, _, grads = loss_and_grads(m, x, beta, eps=eps)
    h, worst = 1e-5, 0.0
    for name, a in m.parameters().items():
        for idx in np.ndindex(a.shape):
            old = a[idx]
            a[idx] = old + h
            up = loss_and_grads(m, x, beta, eps=eps, need_grads=False)[0]
            a[idx] = old - h
            down = loss_and_grads(m, x, beta, eps=eps, need_grads=False)[0]
            a[idx] = old
            fd = (up - down) / (2 * h)
            scale = max(abs(fd), abs(grads[name][idx]))
            if scale > 1e-8:
                worst = max(worst, abs(fd - grads[name][idx]) / scale)
    assert worst <= 1e-4


def test_beta_schedule():
    cfg = TrainConfig()
    assert [cfg.beta(e) for e in range(11)] == pytest.approx([i / 10 for i in range(11)],
                                                              abs=1e-15)
    assert cfg.beta(11) == 1.0 and cfg.beta(500) == 1.0


def test_overfit_single_sample():
    x = np.tile(make_rng(12).standard_normal((1, 12)), (50, 1))
    m = tiny_model(seed=2)
    cfg = TrainConfig(batch_size=10, max_lr=1e-2, max_epochs=300, patience_epochs=300, seed=0)
    best, tlog = train(m, x, x, cfg)
    assert evaluate(best, x)[0] < 1e-2
    assert np.all(tlog.column("train_kl") >= -1e-9)
    assert np.all(tlog.column("val_kl") >= -1e-9)


def test_training_deterministic():
    r = make_rng(13)
    x, v = r.standard_normal((40, 12)), r.standard_normal((10, 12))
    cfg = TrainConfig(batch_size=8, max_lr=1e-3, max_epochs=6, seed=4)
    a, la = train(tiny_model(), x, v, cfg)
    b, lb = train(tiny_model(), x, v, cfg)
    assert la.records == lb.records
    for k, p in a.parameters().items():
        assert np.array_equal(p, b.parameters()[k])


def test_training_does_not_mutate_input_model(tiny):
    before = {k: p.copy() for k, p in tiny.parameters().items()}
    x = make_rng(14).standard_normal((20, 12))
    train(tiny, x, x, TrainConfig(batch_size=5, max_epochs=2))
    for k, p in tiny.parameters().items():
        assert np.array_equal(p, before[k])


def test_early_stopping_returns_best():
    r = make_rng(15)
    x, v = r.standard_normal((30, 12)), r.standard_normal((30, 12))
    cfg = TrainConfig(batch_size=5, max_lr=3e-2, max_epochs=80, patience_epochs=4, seed=1)
    best, tlog = train(tiny_model(), x, v, cfg)
    val = tlog.column("val_mse")
    assert tlog.stopped_early and len(val) < 80
    assert evaluate(best, v)[0] == val.min() == val[tlog.best_epoch]
    assert val[tlog.best_epoch] <= val[-1]
    assert len(val) - 1 - tlog.best_epoch == 4


def test_collapse_warning_flag():
    x = make_rng(16).standard_normal((20, 12))
    cfg = TrainConfig(batch_size=20, max_epochs=2, collapse_threshold=1e9)
    _, tlog = train(tiny_model(), x, x, cfg)
    assert tlog.collapse_warning
    _, tlog = train(tiny_model(), x, x, TrainConfig(batch_size=20, max_epochs=2,
                                                    collapse_threshold=0.0))
    assert not tlog.collapse_warning


def test_checkpoint_round_trip(tmp_path, small_synthetic):
    norm = fit_normalizer(small_synthetic, 0)
    m = tiny_model(data_dim=128, normalizer=norm)
    m.meta["note"] = "x"
    save_checkpoint(m, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt", expected_data_dim=128)
    x = make_rng(17).standard_normal((3, 128))
    for name, net in m.nets().items():
        inp = x if name == "condition_net" else make_rng(1).standard_normal((3, net.input_dim))
        assert forward(net, inp).tobytes() == forward(back.nets()[name], inp).tobytes()
    assert back.normalizer.monthly_mean.tobytes() == norm.monthly_mean.tobytes()
    assert back.normalizer.monthly_std.tobytes() == norm.monthly_std.tobytes()
    assert back.meta == m.meta


def test_checkpoint_errors(tmp_path, tiny):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny, path)
    raw = path.read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "short.ckpt").write_bytes(raw[:-10])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "short.ckpt")
    (tmp_path / "ver.ckpt").write_bytes(raw[:8] + (99).to_bytes(4, "little") + raw[12:])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "ver.ckpt")
    with pytest.raises(ShapeError):
        load_checkpoint(path, expected_data_dim=13)


def _trended_data(seed=0):
    cfg = SyntheticConfig(grid=(8, 16), years=20, members=1, trend_amplitude=3.0, seed=seed)
    s = generate_synthetic_ensemble(cfg)
    z = standardize(s, fit_normalizer(s, 0)).values.reshape(s.n_times, -1)
    return z[:-36], z[-36:]


def _small_model(seed):
    return CvaeModel.init(128, make_rng(seed), latent_dim=16, condition_hidden=(16,),
                          encoder_hidden=(64,), decoder_hidden=(64,))


def test_condition_carries_signal():
    x, v = _trended_data()
    cfg = TrainConfig(batch_size=20, max_lr=2e-3, max_epochs=40, patience_epochs=40, seed=0)
    m, _ = train(_small_model(0), x, v, cfg)
    c = embed_condition(m, x)
    with_c = np.mean((decode_mean(m, encode(m, x, c)[0], c) - x) ** 2)
    zero = np.zeros_like(c)
    without = np.mean((decode_mean(m, encode(m, x, zero)[0], zero) - x) ** 2)
    assert without > with_c


def test_validation_mse_falls_with_beta_zero():
    x, v = _trended_data(seed=1)
    curves = []
    for seed in range(3):
        cfg = TrainConfig(batch_size=20, max_lr=1e-3, max_epochs=11, patience_epochs=99,
                          beta_max=0.0, seed=seed)
        _, tlog = train(_small_model(seed), x, v, cfg)
        assert np.all(tlog.column("beta") == 0.0)
        curves.append(tlog.column("val_mse"))
    rho, p = stats.spearmanr(np.arange(11), np.mean(curves, axis=0))
    assert rho < 0 and p < 0.05
