import numpy as np
import pytest

from ensboost.cvae import CvaeModel, flatten_samples
from ensboost.data import fit_normalizer, standardize
from ensboost.errors import ConditioningError, ConfigError, InsufficientDataError, ShapeError
from ensboost.inference import (GenerationConfig, LatentPrior,
                                bias_correct_annual, cholesky_with_jitter,
                                decoder_noise_from_residuals, estimate_decoder_noise,
                                estimate_inference_components, estimate_latent_prior,
                                generate_ensemble, latent_prior_from_draws, sample_covariance,
                                sample_decoder_noise, sample_latent)
from ensboost.nn_core import make_rng

from conftest import random_series, tiny_model


def cov_se(cov, n):
    """Standard error of Gaussian sample-covariance entries."""
    d = np.diag(cov)
    return np.sqrt((np.outer(d, d) + cov ** 2) / n)


def standard_posterior_model(data_dim=4, latent_dim=2):
    """Encoder output fixed at mu=0, log sigma=0 for every input."""
    m = CvaeModel.init(data_dim, make_rng(0), latent_dim=latent_dim, condition_hidden=(4,),
                       encoder_hidden=(4,), decoder_hidden=(4,))
    m.encoder.layers[-1].weight[:] = 0.0
    m.encoder.layers[-1].bias[:] = 0.0
    return m


def test_two_point_hand_covariance():
    prior = latent_prior_from_draws(np.array([[1.0, 0.0], [-1.0, 0.0]]))
    expected = np.array([[1.0, 0.0], [0.0, 0.0]]) + prior.jitter * np.eye(2)
    np.testing.assert_allclose(prior.covariance(), expected, rtol=0, atol=1e-15)
    assert prior.jitter == pytest.approx(1e-8 * 1.0 / 2)
    assert np.allclose(prior.factor, np.tril(prior.factor))


def test_factor_reconstructs_regularized_covariance():
    r = make_rng(1)
    a = r.standard_normal((30, 6))
    prior = latent_prior_from_draws(a)
    reg = sample_covariance(a) + prior.jitter * np.eye(6)
    err = np.linalg.norm(prior.covariance() - reg) / np.linalg.norm(reg)
    assert err <= 1e-8


def test_jitter_escalation_and_failure():
    cov = np.array([[1.0, 1.0], [1.0, 1.0]])
    factor, jitter = cholesky_with_jitter(cov)
    assert jitter >= 1e-8
    with pytest.raises(ConditioningError):
        cholesky_with_jitter(-np.eye(3))


def test_prior_from_standard_posterior_is_identity():
    m = standard_posterior_model(data_dim=4, latent_dim=3)
    x = make_rng(2).standard_normal((10 ** 4, 4))
    prior = estimate_latent_prior(m, x, seed=3)
    cov = prior.covariance()
    se = cov_se(np.eye(3), 10 ** 4)
    assert np.all(np.abs(cov - np.eye(3)) < 4 * se)


def test_sample_latent_identity_and_target():
    r = make_rng(4)
    ident = LatentPrior(np.eye(3), 0.0)
    a = sample_latent(ident, make_rng(5), 4)
    assert np.array_equal(a, make_rng(5).standard_normal((4, 3)))
    target = np.array([[2.0, 1.0], [1.0, 2.0]])
    prior = LatentPrior(np.linalg.cholesky(target), 0.0)
    z = sample_latent(prior, r, 10 ** 5)
    assert np.all(np.abs(np.cov(z.T) - target) < 0.05)
    assert np.array_equal(sample_latent(prior, make_rng(9), 7), sample_latent(prior, make_rng(9), 7))


@pytest.mark.parametrize("seed", range(3))
def test_latent_sampler_covariance_entrywise(seed):
    r = make_rng(seed)
    k = 4
    a = r.standard_normal((k, k))
    factor = np.linalg.cholesky(a @ a.T + 0.1 * np.eye(k))
    prior = LatentPrior(factor, 0.0)
    n = 10 ** 5
    z = sample_latent(prior, make_rng(seed, 1), n)
    target = factor @ factor.T
    assert np.all(np.abs(np.cov(z.T, bias=True) - target) < 4 * cov_se(target, n))


def test_decoder_noise_hand_instance():
    res = np.array([[1.0, 0.0, 2.0], [0.0, 1.0, -1.0], [2.0, 2.0, 2.0]])
    for ddof in (0, 1):
        noise = decoder_noise_from_residuals(res, ddof=ddof)
        c = res - res.mean(axis=0)
        brute = np.zeros((3, 3))
        for i in range(3):
            for j in range(3):
                brute[i, j] = sum(c[n, i] * c[n, j] for n in range(3)) / (3 - ddof)
        np.testing.assert_allclose(noise.covariance(), brute, rtol=1e-14, atol=1e-15)
        np.testing.assert_allclose(noise.covariance(), np.cov(res.T, ddof=ddof), rtol=1e-14)
        assert np.all(np.abs(noise.residuals.mean(axis=0)) < 1e-10)


def test_zero_residuals_give_zero_noise():
    noise = decoder_noise_from_residuals(np.ones((5, 4)))
    assert not sample_decoder_noise(noise, make_rng(0), 10).any()


def test_decoder_noise_needs_two_samples():
    with pytest.raises(InsufficientDataError):
        decoder_noise_from_residuals(np.ones((1, 4)))
    with pytest.raises(InsufficientDataError):
        estimate_decoder_noise(tiny_model(), np.ones((1, 12)))


@pytest.mark.parametrize("ddof", [0, 1])
def test_decoder_noise_mc_d5(ddof):
    res = make_rng(6).standard_normal((8, 5)) * [1.0, 2.0, 0.5, 1.5, 1.0]
    noise = decoder_noise_from_residuals(res, ddof=ddof)
    n = 10 ** 5
    draws = sample_decoder_noise(noise, make_rng(7), n)
    target = noise.covariance()
    assert np.all(np.abs(draws.mean(0)) < 4 * np.sqrt(np.diag(target) / n))
    assert np.all(np.abs(np.cov(draws.T, bias=True) - target) < 4 * cov_se(target, n))


def test_diagonal_jitter_adds_to_variance():
    res = make_rng(8).standard_normal((4, 3))
    noise = decoder_noise_from_residuals(res, diagonal_jitter=0.25)
    draws = sample_decoder_noise(noise, make_rng(9), 10 ** 5)
    target = noise.covariance()
    assert np.all(np.abs(np.cov(draws.T, bias=True) - target) < 4 * cov_se(target, 10 ** 5))


def test_components_share_posterior_draws():
    m = tiny_model()
    x = make_rng(10).standard_normal((20, 12))
    prior, noise = estimate_inference_components(m, x, seed=4)
    assert np.array_equal(prior.factor, estimate_latent_prior(m, x, seed=4).factor)
    assert np.array_equal(noise.residuals, estimate_decoder_noise(m, x, seed=4).residuals)


def _setup(seed=0, years=3):
    s = random_series(seed=seed, members=1, years=years, h=3, w=4)
    norm = fit_normalizer(s, 0)
    m = tiny_model(seed=seed, normalizer=norm)
    x = flatten_samples(standardize(s, norm))
    prior, noise = estimate_inference_components(m, x, seed=1)
    return m, prior, noise, s


def test_generation_shapes_and_determinism():
    m, prior, noise, s = _setup()
    cfg = GenerationConfig(n_members=24, mode="VAE_DN", bias_correction=False, seed=5)
    a = generate_ensemble(m, prior, noise, s, cfg)
    b = generate_ensemble(m, prior, noise, s, cfg, threads=3)
    assert a.shape == (24, s.n_times, 3, 4)
    assert a.values.tobytes() == b.values.tobytes()
    assert a.member_ids[0] == "gen000" and a.start_year == s.start_year
    prov = a.attrs["provenance"]
    assert prov["mode"] == "VAE_DN" and prov["seed"] == 5 and prov["n_members"] == 24
    # member m of a small run equals member m of a large run
    small = generate_ensemble(m, prior, noise, s, GenerationConfig(n_members=2,
                                                                  bias_correction=False, seed=5))
    assert np.array_equal(small.values, a.values[:2])


def test_vae_mode_is_decoder_of_latent_draws():
    from ensboost.cvae import decode_mean, embed_condition
    from ensboost.data import destandardize
    m, prior, noise, s = _setup()
    out = generate_ensemble(m, prior, noise, s,
                            GenerationConfig(n_members=1, mode="VAE", bias_correction=False,
                                             seed=2))
    c = embed_condition(m, flatten_samples(standardize(s, m.normalizer)))
    z = np.array([make_rng(2, 0, t).standard_normal(m.latent_dim) for t in range(s.n_times)])
    xhat = decode_mean(m, z @ prior.factor.T, c).reshape(1, s.n_times, 3, 4)
    expect = destandardize(s.with_values(xhat, member_ids=["gen000"]), m.normalizer)
    np.testing.assert_allclose(out.values, expect.values, rtol=0, atol=1e-12)


def test_decoder_noise_raises_variance():
    m, prior, noise, s = _setup(years=4)
    base = dict(n_members=40, bias_correction=False, seed=3)
    vae = generate_ensemble(m, prior, noise, s, GenerationConfig(mode="VAE", **base))
    dn = generate_ensemble(m, prior, noise, s, GenerationConfig(mode="VAE_DN", **base))
    assert dn.values.var(axis=0).mean() >= vae.values.var(axis=0).mean()


def test_generation_errors():
    m, prior, noise, s = _setup()
    with pytest.raises(ConfigError):
        generate_ensemble(m, prior, noise, s, GenerationConfig(n_members=0))
    with pytest.raises(ConfigError):
        generate_ensemble(m, prior, noise, s, GenerationConfig(mode="GAN"))
    with pytest.raises(ShapeError):
        generate_ensemble(m, prior, noise, random_series(members=1, h=4, w=4),
                          GenerationConfig())
    with pytest.raises(ShapeError):
        generate_ensemble(m, prior, noise, random_series(members=2, h=3, w=4), GenerationConfig())


def test_bias_correction_examples():
    cond = random_series(members=1, years=3, h=2, w=3)
    shifted = cond.with_values(cond.values + 3.0, member_ids=["g0"])
    out = bias_correct_annual(shifted, cond)
    np.testing.assert_allclose(out.values, cond.values, rtol=0, atol=1e-10)
    same = bias_correct_annual(cond.with_values(cond.values.copy(), member_ids=["g0"]), cond)
    np.testing.assert_allclose(same.values, cond.values, rtol=0, atol=1e-10)


def test_bias_correction_matches_annual_means_and_is_idempotent():
    cond = random_series(seed=1, members=1, years=4, h=3, w=5)
    gen = random_series(seed=2, members=6, years=4, h=3, w=5, scale=4.0)
    out = bias_correct_annual(gen, cond)
    diff = out.by_year().mean(axis=2) - cond.by_year()[0].mean(axis=1)
    assert np.max(np.abs(diff)) <= 1e-9
    again = bias_correct_annual(out, cond)
    np.testing.assert_allclose(again.values, out.values, rtol=0, atol=1e-9)
    # monthly anomalies about the annual mean are kept
    dev = lambda s: s.by_year() - s.by_year().mean(axis=2, keepdims=True)
    np.testing.assert_allclose(dev(out), dev(gen), atol=1e-9)


def test_global_bias_correction():
    cond = random_series(seed=3, members=1, years=2, h=3, w=4)
    gen = cond.with_values(cond.values + np.arange(12).reshape(1, 1, 3, 4), member_ids=["g"])
    out = bias_correct_annual(gen, cond, scope="global")
    w = np.cos(np.deg2rad(cond.lat))[:, None] * np.ones((3, 4))
    gm = lambda v: (v * w).sum(axis=(-2, -1)) / w.sum()
    np.testing.assert_allclose(gm(out.by_year().mean(axis=2)),
                               gm(cond.by_year().mean(axis=2)), atol=1e-9)
    assert not np.allclose(out.values, cond.values)


def test_bias_correction_calendar_mismatch():
    cond = random_series(members=1, years=2)
    gen = random_series(members=2, years=2, start_year=2001)
    with pytest.raises(ShapeError):
        bias_correct_annual(gen, cond)
