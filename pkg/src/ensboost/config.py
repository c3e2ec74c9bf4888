"""Run configuration: YAML file merged over documented defaults.

Unknown keys are rejected. The fully resolved config is hashed and the hash
is stamped into every artifact the CLI writes.
"""

from __future__ import annotations

import copy
import hashlib
import json

import yaml

from . import cvae, data, inference
from .errors import ConfigError

CITIES = [
    {"label": "vancouver", "lat": 49.25, "lon": -123.1},
    {"label": "london", "lat": 51.5, "lon": -0.13},
    {"label": "hong_kong", "lat": 22.3, "lon": 114.2},
    {"label": "los_angeles", "lat": 34.05, "lon": -118.24},
]

DEFAULTS = {
    "data": {
        "synthetic": {
            "grid": [16, 32],
            "years": 40,
            "members": 20,
            "start_year": 1981,
            "trend_amplitude": 0.3,
            "oscillation_period": 45.0,
            "oscillation_amplitude": 1.5,
            "noise_length_scale": 1.5,
            "noise_std": 0.5,
            "noise_lat_gradient": 1.5,
            "skew_factor": 0.3,
            "seasonal_amplitude": 12.0,
            "seed": 0,
        },
        "train_member": 0,
        "train_years": None,  # [start, stop) calendar years; None = all but validation
        "val_years": 5,  # trailing years held out for validation
        "std_floor": 1e-6,
    },
    "model": {
        "latent_dim": 500,
        "condition_dim": 2,
        "condition_hidden": [64, 16],
        "encoder_hidden": [1024, 512],
        "decoder_hidden": [512, 1024],
        "seed": 0,
    },
    "train": {
        "batch_size": 100,
        "max_lr": 1e-4,
        "anneal_epochs": 10,
        "patience_epochs": 15,
        "max_epochs": 200,
        "seed": 0,
        "beta_max": 1.0,
        "collapse_threshold": 1e-3,
        "latent_samples": 1,
    },
    "inference": {
        "n_members": 24,
        "mode": "VAE_DN",
        "bias_correction": True,
        "bias_correction_scope": "cell",
        "seed": 0,
        "estimation_seed": 0,
        "covariance_ddof": 0,
        "decoder_noise_jitter": 0.0,
    },
    "eval": {
        "ref_years": None,  # climatology years; None = whole series
        "years": None,  # analysis period; None = whole series
        "n_quantiles": 99,
        "qq_inner": 0.98,
        "n_bins": 101,
        "percentile": 0.99,
        "index_lat": None,  # None = 5S-5N, widened to the equator rows on coarse grids
        "index_lon": [-170.0, -120.0],
        "composite_percentiles": [0.75, 0.85],
        "composite_train_max": True,
        "la_nina": False,
        "seasons": ["DJF", "JJA"],
        "locations": None,  # list of {label, lat, lon}; None = four cities on global grids
        "figures": True,
        "map_pngs": True,
    },
}

SEED_KEYS = [("data", "synthetic", "seed"), ("model", "seed"), ("train", "seed"),
             ("inference", "seed"), ("inference", "estimation_seed")]


def _merge(base, override, path=""):
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a mapping")
            _merge(base[key], value, where)
        else:
            base[key] = value
    return base


def resolve(overrides=None, seed=None):
    cfg = _merge(copy.deepcopy(DEFAULTS), overrides or {})
    if seed is not None:
        for keys in SEED_KEYS:
            node = cfg
            for k in keys[:-1]:
                node = node[k]
            node[keys[-1]] = int(seed)
    return cfg


def load_config(path=None, seed=None):
    overrides = {}
    if path is not None:
        try:
            with open(path) as fh:
                overrides = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from None
        if not isinstance(overrides, dict):
            raise ConfigError("config file must contain a mapping")
    return resolve(overrides, seed)


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def dump_config(cfg):
    return yaml.safe_dump(cfg, sort_keys=True)


def synthetic_config(cfg):
    s = dict(cfg["data"]["synthetic"])
    s["grid"] = tuple(s["grid"])
    try:
        sc = data.SyntheticConfig(**s)
        sc.validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return sc


def train_config(cfg):
    return cvae.TrainConfig(**cfg["train"])


def generation_config(cfg):
    inf = cfg["inference"]
    gc = inference.GenerationConfig(n_members=inf["n_members"], mode=inf["mode"],
                                    bias_correction=inf["bias_correction"],
                                    bias_correction_scope=inf["bias_correction_scope"],
                                    seed=inf["seed"])
    gc.validate()
    return gc


def year_split(cfg, series):
    """Training and validation calendar-year ranges for ``series``."""
    first, stop = series.start_year, series.start_year + series.n_years
    n_val = cfg["data"]["val_years"]
    if n_val < 1:
        raise ConfigError("data.val_years must be >= 1")
    ty = cfg["data"]["train_years"]
    if ty is None:
        train = (first, stop - n_val)
    else:
        train = (int(ty[0]), int(ty[1]))
    val = (train[1], train[1] + n_val)
    if val[1] > stop:
        raise ConfigError(f"validation years {val} run past the series end {stop}")
    if train[1] - train[0] < 2:
        raise ConfigError(f"training years {train} leave fewer than 2 years")
    return train, val
