"""Inference-time sampling from a trained cVAE.

At generation time the unit-normal prior is replaced by a zero-mean
Gaussian whose covariance is the empirical covariance of posterior draws
of the training samples, and the decoder mean is perturbed with noise whose
covariance is the empirical covariance of the training reconstruction
residuals. The residual covariance is never formed: with the centred
residual matrix ``R`` (N x D), ``R.T @ g * scale`` for ``g ~ N(0, I_N)``
has covariance ``R.T @ R * scale**2`` exactly.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .cvae import decode_mean, embed_condition, encode, flatten_samples
from .data import FieldSeries, destandardize, standardize
from .errors import ConditioningError, ConfigError, InsufficientDataError, ShapeError
from .nn_core import make_rng

log = logging.getLogger(__name__)

POSTERIOR_STREAM = 17
MODES = ("VAE", "VAE_DN")
MAX_JITTER_ESCALATIONS = 8


def _rows(x):
    if isinstance(x, FieldSeries):
        return flatten_samples(x)
    return np.asarray(x, dtype=np.float64)


def posterior_draws(model, x, seed, batch_size=500):
    """One reparameterized posterior draw per row plus the decoder means.

    Returns ``(z, xhat)``. The draws come from a fixed substream of ``seed``
    so the latent prior and the decoder noise see the same ``z_i``.
    """
    x = _rows(x)
    rng = make_rng(seed, POSTERIOR_STREAM)
    zs, xs = [], []
    for i in range(0, len(x), batch_size):
        xb = x[i:i + batch_size]
        c = embed_condition(model, xb)
        mu, sigma = encode(model, xb, c)
        z = mu + sigma * rng.standard_normal(mu.shape)
        zs.append(z)
        xs.append(decode_mean(model, z, c))
    return np.vstack(zs), np.vstack(xs)


def sample_covariance(rows, ddof=0):
    rows = np.asarray(rows, dtype=np.float64)
    n = len(rows)
    if n - ddof < 1:
        raise InsufficientDataError(f"{n} samples are too few for a covariance with ddof={ddof}")
    centred = rows - rows.mean(axis=0)
    return centred.T @ centred / (n - ddof)


def cholesky_with_jitter(cov, jitter=None):
    """Lower Cholesky factor of ``cov + jitter*I``, doubling jitter on failure."""
    cov = np.asarray(cov, dtype=np.float64)
    k = cov.shape[0]
    if jitter is None:
        jitter = 1e-8 * float(np.trace(cov)) / k
        if jitter <= 0.0:
            jitter = 1e-12
    eye = np.eye(k)
    for _ in range(MAX_JITTER_ESCALATIONS + 1):
        try:
            return np.linalg.cholesky(cov + jitter * eye), jitter
        except np.linalg.LinAlgError:
            jitter *= 2.0
    raise ConditioningError(f"covariance not positive definite even with jitter {jitter / 2:g}")


@dataclass
class LatentPrior:
    factor: np.ndarray  # lower triangular (k, k)
    jitter: float
    ddof: int = 0

    @property
    def latent_dim(self):
        return self.factor.shape[0]

    def covariance(self):
        return self.factor @ self.factor.T


@dataclass
class DecoderNoiseModel:
    residuals: np.ndarray  # centred, (N, D)
    scale: float
    diagonal_jitter: float = 0.0
    ddof: int = 0

    @property
    def data_dim(self):
        return self.residuals.shape[1]

    def covariance(self):
        """Dense D x D covariance; only for small instances and tests."""
        cov = self.residuals.T @ self.residuals * self.scale ** 2
        return cov + self.diagonal_jitter * np.eye(self.data_dim)


def latent_prior_from_draws(z, ddof=0):
    cov = sample_covariance(z, ddof)
    factor, jitter = cholesky_with_jitter(cov)
    return LatentPrior(factor, jitter, ddof)


def decoder_noise_from_residuals(residuals, ddof=0, diagonal_jitter=0.0):
    residuals = np.asarray(residuals, dtype=np.float64)
    n = len(residuals)
    if n < 2:
        raise InsufficientDataError("decoder noise needs at least 2 training samples")
    centred = residuals - residuals.mean(axis=0)
    return DecoderNoiseModel(centred, 1.0 / math.sqrt(n - ddof), diagonal_jitter, ddof)


def estimate_latent_prior(model, train_x, seed=0, ddof=0):
    z, _ = posterior_draws(model, train_x, seed)
    return latent_prior_from_draws(z, ddof)


def estimate_decoder_noise(model, train_x, seed=0, ddof=0, diagonal_jitter=0.0):
    x = _rows(train_x)
    if len(x) < 2:
        raise InsufficientDataError("decoder noise needs at least 2 training samples")
    _, xhat = posterior_draws(model, x, seed)
    return decoder_noise_from_residuals(x - xhat, ddof, diagonal_jitter)


def estimate_inference_components(model, train_x, seed=0, ddof=0, diagonal_jitter=0.0):
    """Latent prior and decoder noise from a single pass of posterior draws."""
    x = _rows(train_x)
    if len(x) < 2:
        raise InsufficientDataError("need at least 2 training samples")
    z, xhat = posterior_draws(model, x, seed)
    return (latent_prior_from_draws(z, ddof),
            decoder_noise_from_residuals(x - xhat, ddof, diagonal_jitter))


def sample_latent(prior, rng, n):
    g = rng.standard_normal((n, prior.latent_dim))
    return g @ prior.factor.T


def sample_decoder_noise(noise, rng, n):
    g = rng.standard_normal((n, len(noise.residuals)))
    out = (g @ noise.residuals) * noise.scale
    if noise.diagonal_jitter > 0:
        out += math.sqrt(noise.diagonal_jitter) * rng.standard_normal(out.shape)
    return out


# --------------------------------------------------------------------------
# generation

@dataclass
class GenerationConfig:
    n_members: int = 24
    mode: str = "VAE_DN"
    bias_correction: bool = True
    bias_correction_scope: str = "cell"  # or "global"
    seed: int = 0
    extra_attrs: dict = field(default_factory=dict)

    def validate(self):
        if self.n_members < 1:
            raise ConfigError("n_members must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.bias_correction_scope not in ("cell", "global"):
            raise ConfigError("bias_correction_scope must be 'cell' or 'global'")


def _generate_member(model, prior, noise, cond_c, member, config):
    n_t = len(cond_c)
    k = prior.latent_dim
    g_z = np.empty((n_t, k))
    g_x = np.empty((n_t, len(noise.residuals))) if config.mode == "VAE_DN" else None
    for t in range(n_t):
        rng = make_rng(config.seed, member, t)
        g_z[t] = rng.standard_normal(k)
        if g_x is not None:
            g_x[t] = rng.standard_normal(len(noise.residuals))
    out = decode_mean(model, g_z @ prior.factor.T, cond_c)
    if g_x is not None:
        out = out + (g_x @ noise.residuals) * noise.scale
        if noise.diagonal_jitter > 0:
            jit = np.empty(out.shape)
            for t in range(n_t):
                jit[t] = make_rng(config.seed, member, t, 1).standard_normal(out.shape[1])
            out += math.sqrt(noise.diagonal_jitter) * jit
    return out


def generate_ensemble(model, prior, noise, conditioning, config, threads=1):
    """Boosted ensemble in field units, conditioned on a one-member series.

    Member ``m`` at time ``t`` uses the random substream ``(seed, m, t)``;
    the latent draw comes first from that stream so VAE and VAE_DN runs
    share their latent samples.
    """
    config.validate()
    if conditioning.n_members != 1:
        raise ShapeError(f"conditioning series must have one member, has {conditioning.n_members}")
    h, w = conditioning.grid_shape
    if h * w != model.data_dim:
        raise ShapeError(f"conditioning grid {(h, w)} does not match checkpoint data "
                         f"dimension {model.data_dim}")
    if prior.latent_dim != model.latent_dim:
        raise ShapeError("latent prior dimension does not match model")
    if config.mode == "VAE_DN" and noise.data_dim != model.data_dim:
        raise ShapeError("decoder noise dimension does not match model")
    std = standardize(conditioning, model.normalizer)
    cond_c = embed_condition(model, flatten_samples(std))

    def run(m):
        return _generate_member(model, prior, noise, cond_c, m, config)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(run, range(config.n_members)))
    else:
        rows = [run(m) for m in range(config.n_members)]
    values = np.stack(rows).reshape(config.n_members, conditioning.n_times, h, w)
    attrs = {"mode": config.mode, "seed": int(config.seed),
             "n_members": int(config.n_members),
             "bias_correction": bool(config.bias_correction),
             "conditioning_member": conditioning.member_ids[0]}
    attrs.update(config.extra_attrs)
    out = FieldSeries(values, conditioning.lat, conditioning.lon, conditioning.start_year,
                      [f"gen{m:03d}" for m in range(config.n_members)],
                      {"provenance": attrs})
    out = destandardize(out, model.normalizer)
    if config.bias_correction:
        out = bias_correct_annual(out, conditioning, config.bias_correction_scope)
        out.attrs["provenance"]["bias_correction_scope"] = config.bias_correction_scope
    return out


def bias_correct_annual(generated, conditioning, scope="cell"):
    """Shift every member so its annual means match the conditioning input's.

    ``scope="cell"`` matches annual means at every cell; ``"global"``
    removes only the cos(lat)-weighted global-mean annual offset.
    """
    if (generated.start_year != conditioning.start_year
            or generated.n_times != conditioning.n_times):
        raise ShapeError("generated and conditioning series cover different calendars")
    generated.check_grid(conditioning, "conditioning")
    if conditioning.n_members != 1:
        raise ShapeError("conditioning series must have one member")
    g = generated.by_year()
    offset = g.mean(axis=2) - conditioning.by_year()[0].mean(axis=1)  # (M, Y, H, W)
    if scope == "global":
        w = np.cos(np.deg2rad(generated.lat))[:, None] * np.ones(generated.grid_shape)
        offset = np.broadcast_to(
            np.tensordot(offset, w, axes=([2, 3], [0, 1]))[..., None, None] / w.sum(),
            offset.shape)
    elif scope != "cell":
        raise ConfigError(f"unknown bias-correction scope {scope!r}")
    corrected = g - offset[:, :, None]
    return generated.with_values(corrected.reshape(generated.shape))
