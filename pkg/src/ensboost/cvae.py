"""Conditional VAE on flattened standardized fields, with its trainer.

Three dense nets make up the model:

* ``condition_net``  x -> c          (low-dimensional condition embedding)
* ``encoder``        [x, c] -> [mu_z, log sigma_z]
* ``decoder``        [z, c] -> mean field

The training decoder has unit variance, so the reconstruction term is a
plain MSE; the KL term is divided by the field size ``D`` so that both
terms are per-element quantities.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Normalizer
from .errors import DivergenceError, FormatError, ShapeError
from .nn_core import Adam, DenseNet, Layer, backward_from_cache, forward, forward_cache, make_rng

log = logging.getLogger(__name__)

LOG_SIGMA_CLAMP = 10.0
CKPT_MAGIC = b"CVAECKPT"
CKPT_VERSION = 1
_CKPT_PREFIX = struct.Struct("<8sIQ")
NETS = ("condition_net", "encoder", "decoder")


@dataclass
class CvaeModel:
    condition_net: DenseNet
    encoder: DenseNet
    decoder: DenseNet
    normalizer: Normalizer | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        d = self.condition_net.input_dim
        c = self.condition_net.output_dim
        k2 = self.encoder.output_dim
        if k2 % 2:
            raise ShapeError("encoder must output [mu, log sigma] pairs")
        k = k2 // 2
        if self.encoder.input_dim != d + c:
            raise ShapeError(f"encoder input {self.encoder.input_dim} != D + C = {d + c}")
        if self.decoder.input_dim != k + c or self.decoder.output_dim != d:
            raise ShapeError(f"decoder maps {self.decoder.input_dim}->{self.decoder.output_dim},"
                             f" expected {k + c}->{d}")
        if self.normalizer is not None and self.normalizer.monthly_mean[0].size != d:
            raise ShapeError("normalizer grid does not match model data dimension")

    @classmethod
    def init(cls, data_dim, rng, latent_dim=500, condition_dim=2,
             condition_hidden=(64, 16), encoder_hidden=(1024, 512),
             decoder_hidden=(512, 1024), normalizer=None, meta=None):
        cond = DenseNet.init([data_dim, *condition_hidden, condition_dim], rng)
        enc = DenseNet.init([data_dim + condition_dim, *encoder_hidden, 2 * latent_dim], rng)
        dec = DenseNet.init([latent_dim + condition_dim, *decoder_hidden, data_dim], rng)
        return cls(cond, enc, dec, normalizer, dict(meta or {}))

    @property
    def data_dim(self):
        return self.condition_net.input_dim

    @property
    def condition_dim(self):
        return self.condition_net.output_dim

    @property
    def latent_dim(self):
        return self.encoder.output_dim // 2

    def nets(self):
        return {"condition_net": self.condition_net, "encoder": self.encoder,
                "decoder": self.decoder}

    def parameters(self):
        params = {}
        for net_name, net in self.nets().items():
            for k, v in net.parameters().items():
                params[f"{net_name}.{k}"] = v
        return params

    def copy(self):
        return CvaeModel(self.condition_net.copy(), self.encoder.copy(), self.decoder.copy(),
                         copy.deepcopy(self.normalizer), copy.deepcopy(self.meta))


def _check(x, width, what):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != width:
        raise ShapeError(f"{what} must be (B, {width}), got {x.shape}")
    return x


def embed_condition(model, x):
    return forward(model.condition_net, _check(x, model.data_dim, "x batch"))


def _split_encoder(model, h):
    k = model.latent_dim
    mu, pre = h[:, :k], h[:, k:]
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(pre))):
        raise DivergenceError("encoder produced non-finite output")
    return mu, pre


def encode(model, x, c):
    """Posterior parameters ``(mu_z, sigma_z)``; log sigma is clamped to +-10."""
    x = _check(x, model.data_dim, "x batch")
    c = _check(c, model.condition_dim, "condition batch")
    if len(x) != len(c):
        raise ShapeError("x and condition batches differ in length")
    mu, pre = _split_encoder(model, forward(model.encoder, np.hstack([x, c])))
    return mu, np.exp(np.clip(pre, -LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP))


def reparameterize(mu, sigma, rng=None, eps=None):
    """``z = mu + sigma * eps``; pass ``eps`` to fix the noise."""
    if eps is None:
        eps = rng.standard_normal(np.shape(mu))
    return mu + sigma * eps


def decode_mean(model, z, c):
    z = _check(z, model.latent_dim, "z batch")
    c = _check(c, model.condition_dim, "condition batch")
    if len(z) != len(c):
        raise ShapeError("z and condition batches differ in length")
    return forward(model.decoder, np.hstack([z, c]))


def kl_diag_gaussian(mu, sigma):
    """KL(N(mu, diag sigma^2) || N(0, I)) per row."""
    mu = np.atleast_2d(mu)
    sigma = np.atleast_2d(sigma)
    return 0.5 * np.sum(mu * mu + sigma * sigma - 1.0 - 2.0 * np.log(sigma), axis=1)


def loss_and_grads(model, x, beta, rng=None, eps=None, need_grads=True):
    """Annealed negative ELBO and its gradients for one latent draw per row.

    Returns ``(loss, recon_mse, kl, grads)`` where ``kl`` is the batch mean
    of the per-sample KL and ``grads`` is keyed like ``model.parameters()``.
    """
    x = _check(x, model.data_dim, "x batch")
    b, d = x.shape
    k, cdim = model.latent_dim, model.condition_dim

    c, cache_c = forward_cache(model.condition_net, x)
    h, cache_e = forward_cache(model.encoder, np.hstack([x, c]))
    mu, pre = _split_encoder(model, h)
    log_sigma = np.clip(pre, -LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP)
    sigma = np.exp(log_sigma)
    if eps is None:
        eps = rng.standard_normal((b, k))
    z = mu + sigma * eps
    xhat, cache_d = forward_cache(model.decoder, np.hstack([z, c]))

    diff = xhat - x
    recon = float(np.mean(diff * diff))
    kl_rows = 0.5 * np.sum(mu * mu + sigma * sigma - 1.0 - 2.0 * log_sigma, axis=1)
    kl = float(kl_rows.mean())
    loss = recon + beta * kl / d
    if not math.isfinite(loss):
        raise DivergenceError("non-finite loss")
    if not need_grads:
        return loss, recon, kl, None

    gd, g_dec_in = backward_from_cache(model.decoder, cache_d, 2.0 * diff / (b * d))
    gz, gc = g_dec_in[:, :k], g_dec_in[:, k:]
    w = beta / (d * b)
    g_mu = gz + w * mu
    g_logs = gz * eps * sigma + w * (sigma * sigma - 1.0)
    g_logs = g_logs * (np.abs(pre) < LOG_SIGMA_CLAMP)
    ge, g_enc_in = backward_from_cache(model.encoder, cache_e, np.hstack([g_mu, g_logs]))
    gc = gc + g_enc_in[:, d:d + cdim]
    gcn, _ = backward_from_cache(model.condition_net, cache_c, gc)

    grads = {}
    for prefix, g in (("condition_net", gcn), ("encoder", ge), ("decoder", gd)):
        for name, v in g.items():
            grads[f"{prefix}.{name}"] = v
    return loss, recon, kl, grads


def elbo_loss(model, x, beta, rng=None, eps=None):
    loss, recon, kl, _ = loss_and_grads(model, x, beta, rng, eps, need_grads=False)
    return loss, recon, kl


def evaluate(model, x, batch_size=500):
    """Deterministic reconstruction MSE (decoding the posterior mean) and mean KL."""
    sq, kl, n = 0.0, 0.0, len(x)
    for i in range(0, n, batch_size):
        xb = x[i:i + batch_size]
        c = embed_condition(model, xb)
        mu, sigma = encode(model, xb, c)
        xhat = decode_mean(model, mu, c)
        sq += float(np.sum((xhat - xb) ** 2))
        kl += float(kl_diag_gaussian(mu, sigma).sum())
    return sq / (n * x.shape[1]), kl / n


# --------------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    batch_size: int = 100
    max_lr: float = 1e-4
    anneal_epochs: int = 10
    patience_epochs: int = 15
    max_epochs: int = 200
    seed: int = 0
    beta_max: float = 1.0
    collapse_threshold: float = 1e-3  # nats per latent dimension
    latent_samples: int = 1

    def beta(self, epoch):
        if self.anneal_epochs <= 0:
            return self.beta_max
        return self.beta_max * min(1.0, max(0.0, epoch / self.anneal_epochs))


LOG_COLUMNS = ("epoch", "train_loss", "train_mse", "train_kl", "val_mse", "val_kl",
               "beta", "lr")


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False
    collapse_warning: bool = False
    kl_normalization: str = "kl / D"

    def column(self, name):
        return np.array([r[name] for r in self.records])

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write(",".join(LOG_COLUMNS) + "\n")
            for r in self.records:
                fh.write(",".join(repr(r[c]) if c != "epoch" else str(r[c])
                                  for c in LOG_COLUMNS) + "\n")


def flatten_samples(series):
    """(member, time, lat, lon) -> (member*time, lat*lon) rows."""
    m, t, h, w = series.shape
    return series.values.reshape(m * t, h * w)


def train(model, train_x, val_x, config):
    """Fit ``model`` on standardized rows; return the best-validation copy and the log.

    ``train_x``/``val_x`` are (N, D) arrays or standardized FieldSeries.
    """
    if hasattr(train_x, "values") and hasattr(train_x, "member_ids"):
        train_x = flatten_samples(train_x)
    if hasattr(val_x, "values") and hasattr(val_x, "member_ids"):
        val_x = flatten_samples(val_x)
    train_x = _check(train_x, model.data_dim, "training data")
    val_x = _check(val_x, model.data_dim, "validation data")
    if len(train_x) == 0 or len(val_x) == 0:
        raise ShapeError("training and validation sets must be non-empty")

    model = model.copy()
    params = model.parameters()
    n = len(train_x)
    steps_per_epoch = math.ceil(n / config.batch_size)
    opt = Adam(params, config.max_lr, total_steps=max(1, config.max_epochs * steps_per_epoch))
    shuffle_rng = make_rng(config.seed, 1)
    eps_rng = make_rng(config.seed, 2)

    tlog = TrainLog()
    best, best_val, since_best = model.copy(), math.inf, 0
    for epoch in range(config.max_epochs):
        beta = config.beta(epoch)
        lr = opt.lr()
        perm = shuffle_rng.permutation(n)
        tot = np.zeros(3)
        for bi, i in enumerate(range(0, n, config.batch_size)):
            xb = train_x[perm[i:i + config.batch_size]]
            try:
                acc, grads = np.zeros(3), None
                for _ in range(config.latent_samples):
                    loss, recon, kl, g = loss_and_grads(model, xb, beta, eps_rng)
                    acc += (loss, recon, kl)
                    grads = g if grads is None else {k: grads[k] + g[k] for k in grads}
                if config.latent_samples > 1:
                    acc /= config.latent_samples
                    grads = {k: v / config.latent_samples for k, v in grads.items()}
                opt.step(params, grads)
            except DivergenceError as exc:
                raise DivergenceError(str(exc), parameter=exc.parameter, epoch=epoch,
                                      batch=bi) from None
            tot += acc * len(xb)
        tot /= n
        val_mse, val_kl = evaluate(model, val_x)
        if not (math.isfinite(val_mse) and math.isfinite(val_kl)):
            raise DivergenceError("non-finite validation metrics", epoch=epoch)
        tlog.records.append({"epoch": epoch, "train_loss": float(tot[0]),
                             "train_mse": float(tot[1]), "train_kl": float(tot[2]),
                             "val_mse": val_mse, "val_kl": val_kl, "beta": beta, "lr": lr})
        log.info("epoch %d loss %.5f mse %.5f kl %.3f val_mse %.5f beta %.2f", epoch,
                 tot[0], tot[1], tot[2], val_mse, beta)
        if val_mse < best_val:
            best, best_val, since_best = model.copy(), val_mse, 0
            tlog.best_epoch = epoch
        else:
            since_best += 1
            if since_best >= config.patience_epochs:
                tlog.stopped_early = True
                break

    if tlog.records:
        best_kl = tlog.records[tlog.best_epoch]["val_kl"]
        if best_kl / model.latent_dim < config.collapse_threshold:
            tlog.collapse_warning = True
            log.warning("posterior collapse suspected: validation KL %.3g nats over %d "
                        "latent dimensions", best_kl, model.latent_dim)
    best.meta["train_config"] = asdict(config)
    best.meta["best_epoch"] = tlog.best_epoch
    return best, tlog


# --------------------------------------------------------------------------
# checkpoints

def save_checkpoint(model, path):
    arrays = []
    header = {"nets": {}, "normalizer": None, "meta": model.meta}
    for name, net in model.nets().items():
        header["nets"][name] = {"sizes": net.sizes,
                                "activations": [l.activation for l in net.layers]}
        for layer in net.layers:
            arrays += [layer.weight, layer.bias]
    if model.normalizer is not None:
        header["normalizer"] = {"std_floor": model.normalizer.std_floor,
                                "shape": list(model.normalizer.monthly_mean.shape)}
        arrays += [model.normalizer.monthly_mean, model.normalizer.monthly_std]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_PREFIX.pack(CKPT_MAGIC, CKPT_VERSION, len(blob)))
        fh.write(blob)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path, expected_data_dim=None):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _CKPT_PREFIX.size:
        raise FormatError("checkpoint truncated before header", 0)
    magic, version, hlen = _CKPT_PREFIX.unpack_from(raw, 0)
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", 0)
    if version != CKPT_VERSION:
        raise FormatError(f"checkpoint version {version}, this build reads {CKPT_VERSION}", 8)
    off = _CKPT_PREFIX.size
    try:
        header = json.loads(raw[off:off + hlen].decode("utf-8"))
        specs = [(n, header["nets"][n]) for n in NETS]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed checkpoint header: {exc}", off) from None
    off += hlen

    def take(shape):
        nonlocal off
        nbytes = 8 * math.prod(shape)
        if off + nbytes > len(raw):
            raise FormatError("checkpoint truncated inside parameter data", off)
        a = np.frombuffer(raw, dtype="<f8", count=math.prod(shape), offset=off)
        off += nbytes
        return a.reshape(shape).astype(np.float64)

    nets = {}
    for name, spec in specs:
        sizes, acts = spec["sizes"], spec["activations"]
        layers = [Layer(take((o, i)), take((o,)), a)
                  for i, o, a in zip(sizes[:-1], sizes[1:], acts)]
        nets[name] = DenseNet(layers)
    norm = None
    if header["normalizer"] is not None:
        shape = tuple(header["normalizer"]["shape"])
        norm = Normalizer(take(shape), take(shape), header["normalizer"]["std_floor"])
    if off != len(raw):
        raise FormatError(f"{len(raw) - off} trailing bytes after checkpoint data", off)
    model = CvaeModel(nets["condition_net"], nets["encoder"], nets["decoder"], norm,
                      header["meta"])
    if expected_data_dim is not None and model.data_dim != expected_data_dim:
        raise ShapeError(f"checkpoint data dimension {model.data_dim} does not match grid "
                         f"size {expected_data_dim}")
    return model


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
