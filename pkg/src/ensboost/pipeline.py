"""Pipeline stages behind the CLI subcommands.

Each stage reads and writes files so the pipeline can be resumed from any
persisted artifact.
"""

from __future__ import annotations

import logging
import os
import re

import numpy as np

from . import config as cfgmod
from . import evaluation as ev
from .cvae import (CvaeModel, TrainLog, file_sha256, flatten_samples, load_checkpoint,
                   save_checkpoint, train)
from .data import (fit_normalizer, generate_synthetic_ensemble, read_field_series,
                   split_train_validation, standardize, write_field_series)
from .errors import ConfigError, DataError
from .inference import (DecoderNoiseModel, LatentPrior, estimate_inference_components,
                        generate_ensemble)
from .nn_core import make_rng
from .report import EvalReport, Map, Scalar

log = logging.getLogger(__name__)

CACHE_SUFFIX = ".inference.npz"


def _stamp(attrs, cfg):
    attrs = dict(attrs)
    attrs["config_hash"] = cfgmod.config_hash(cfg)
    return attrs


# --------------------------------------------------------------------------
# synthesize

def synthesize(cfg, out_path):
    series = generate_synthetic_ensemble(cfgmod.synthetic_config(cfg))
    series.attrs = _stamp(series.attrs, cfg)
    write_field_series(series, out_path)
    return series


def summary_lines(series):
    v = series.values
    return [
        f"members={series.n_members} months={series.n_times} grid={series.grid_shape[0]}x"
        f"{series.grid_shape[1]} years={series.start_year}-{series.start_year + series.n_years - 1}",
        f"mean={v.mean():.4f} std={v.std():.4f} min={v.min():.4f} max={v.max():.4f}",
    ]


# --------------------------------------------------------------------------
# train

def train_stage(cfg, ens_path, ckpt_path, log_path=None, member=None, resume=None,
                epochs=None):
    """Train on one member; returns ``(model, TrainLog)``.

    With ``resume`` the checkpoint's weights and normalizer are reused and
    training continues for ``epochs`` more epochs (0 rewrites it unchanged).
    """
    series = read_field_series(ens_path)
    member = cfg["data"]["train_member"] if member is None else member
    if not 0 <= member < series.n_members:
        raise ConfigError(f"training member index {member} outside 0..{series.n_members - 1}")
    one = series.select_members([member])
    train_years, val_years = cfgmod.year_split(cfg, one)
    tcfg = cfgmod.train_config(cfg)
    if epochs is not None:
        tcfg.max_epochs = int(epochs)
    log_path = log_path or ckpt_path + ".log.csv"

    if resume is not None:
        model = load_checkpoint(resume, expected_data_dim=one.grid_shape[0] * one.grid_shape[1])
        if tcfg.max_epochs == 0:
            save_checkpoint(model, ckpt_path)
            TrainLog().to_csv(log_path)
            return model, TrainLog()
        norm = model.normalizer
    else:
        norm = fit_normalizer(one, 0, train_years, cfg["data"]["std_floor"])
        mc = cfg["model"]
        model = CvaeModel.init(one.grid_shape[0] * one.grid_shape[1], make_rng(mc["seed"], 0),
                               latent_dim=mc["latent_dim"], condition_dim=mc["condition_dim"],
                               condition_hidden=mc["condition_hidden"],
                               encoder_hidden=mc["encoder_hidden"],
                               decoder_hidden=mc["decoder_hidden"], normalizer=norm)
    tr, va = split_train_validation(standardize(one, norm), train_years, val_years)
    model, tlog = train(model, tr, va, tcfg)
    model.meta.update({
        "lat": one.lat.tolist(), "lon": one.lon.tolist(),
        "train_member_id": one.member_ids[0], "train_years": list(train_years),
        "val_years": list(val_years), "config_hash": cfgmod.config_hash(cfg),
        "source_sha256": file_sha256(ens_path), "collapse_warning": tlog.collapse_warning,
        "resumed_from": file_sha256(resume) if resume is not None else None,
    })
    save_checkpoint(model, ckpt_path)
    tlog.to_csv(log_path)
    return model, tlog


# --------------------------------------------------------------------------
# generate

def _check_checkpoint_grid(model, series):
    lat, lon = model.meta.get("lat"), model.meta.get("lon")
    h, w = series.grid_shape
    if h * w != model.data_dim or (lat is not None and (
            len(lat) != h or len(lon) != w
            or not np.array_equal(lat, series.lat) or not np.array_equal(lon, series.lon))):
        shape = (len(lat), len(lon)) if lat is not None else (model.data_dim,)
        raise DataError(f"checkpoint grid {shape} does not match conditioning grid {(h, w)}")


def _save_cache(path, prior, noise, key):
    np.savez(path, factor=prior.factor, jitter=prior.jitter, residuals=noise.residuals,
             scale=noise.scale, diagonal_jitter=noise.diagonal_jitter,
             ddof=prior.ddof, checkpoint_sha256=key["checkpoint_sha256"],
             settings=repr(sorted(key.items())))


def _load_cache(path, key):
    with np.load(path, allow_pickle=False) as z:
        if str(z["checkpoint_sha256"]) != key["checkpoint_sha256"]:
            raise DataError(f"inference cache {path} was built from a different checkpoint; "
                            f"delete it or pass --refresh-cache")
        if str(z["settings"]) != repr(sorted(key.items())):
            return None
        ddof = int(z["ddof"])
        prior = LatentPrior(z["factor"].copy(), float(z["jitter"]), ddof)
        noise = DecoderNoiseModel(z["residuals"].copy(), float(z["scale"]),
                                  float(z["diagonal_jitter"]), ddof)
    return prior, noise


def generate_stage(cfg, ckpt_path, cond_path, out_path, threads=1, member_id=None,
                   refresh_cache=False):
    model = load_checkpoint(ckpt_path)
    ckpt_hash = file_sha256(ckpt_path)
    cond_all = read_field_series(cond_path)
    _check_checkpoint_grid(model, cond_all)
    train_id = model.meta.get("train_member_id")
    wanted = member_id if member_id is not None else train_id
    if wanted is not None and wanted in cond_all.member_ids:
        cond = cond_all.select_members([cond_all.member_index(wanted)])
    elif cond_all.n_members == 1 and member_id is None:
        cond = cond_all
    else:
        raise DataError(f"conditioning file has no member {wanted!r}; "
                        f"available: {cond_all.member_ids[:5]}...")
    alternative = cond.member_ids[0] != train_id

    inf = cfg["inference"]
    ty = model.meta.get("train_years") or [cond.start_year, cond.start_year + cond.n_years]
    key = {"checkpoint_sha256": ckpt_hash, "estimation_seed": int(inf["estimation_seed"]),
           "ddof": int(inf["covariance_ddof"]),
           "diagonal_jitter": float(inf["decoder_noise_jitter"]),
           "conditioning_member": cond.member_ids[0], "train_years": list(ty),
           "conditioning_sha256": file_sha256(cond_path)}
    cache_path = ckpt_path + CACHE_SUFFIX
    cached = None
    if os.path.exists(cache_path) and not refresh_cache:
        cached = _load_cache(cache_path, key)
    if cached is not None:
        log.info("using cached inference components from %s; skipping estimation", cache_path)
        prior, noise = cached
    else:
        log.info("estimating latent prior and decoder noise")
        train_x = flatten_samples(standardize(cond.select_years(*ty), model.normalizer))
        prior, noise = estimate_inference_components(
            model, train_x, seed=key["estimation_seed"], ddof=key["ddof"],
            diagonal_jitter=key["diagonal_jitter"])
        _save_cache(cache_path, prior, noise, key)

    gcfg = cfgmod.generation_config(cfg)
    gcfg.extra_attrs = {"checkpoint_sha256": ckpt_hash,
                        "estimation_seed": key["estimation_seed"],
                        "alternative_conditioning": bool(alternative),
                        "latent_prior_jitter": prior.jitter}
    out = generate_ensemble(model, prior, noise, cond, gcfg, threads=threads)
    out.attrs = _stamp(out.attrs, cfg)
    write_field_series(out, out_path)
    return out


# --------------------------------------------------------------------------
# evaluate

def _safe(label):
    return re.sub(r"[^A-Za-z0-9_]+", "_", str(label)).strip("_").lower() or "loc"


def is_global_grid(lat, lon):
    return (float(np.max(lat) - np.min(lat)) >= 150.0
            and len(lon) > 1 and float(np.max(lon) - np.min(lon)) + float(np.diff(lon).mean())
            >= 355.0)


def resolve_index_lat(bounds, lat):
    """Latitude band for the index; ``None`` means 5S-5N on the given grid.

    When no cell centre lies within 5 degrees of the equator the band is
    widened to the rows on either side of it.
    """
    if bounds is not None:
        return (float(bounds[0]), float(bounds[1]))
    lat = np.asarray(lat)
    if np.any(np.abs(lat) <= 5.0):
        return (-5.0, 5.0)
    south, north = lat[lat < 0], lat[lat > 0]
    lo = float(south.max()) if south.size else float(lat.min())
    hi = float(north.min()) if north.size else float(lat.max())
    return (lo, hi)


def _check_inputs(boosted, population, train):
    for name, s in (("population", population), ("train", train)):
        if not boosted.same_grid(s):
            raise DataError(f"grid mismatch: boosted {boosted.grid_shape} vs {name} "
                            f"{s.grid_shape}")
        if s.start_year != boosted.start_year or s.n_times != boosted.n_times:
            raise DataError(f"calendar mismatch: boosted {boosted.start_year}+"
                            f"{boosted.n_times} months vs {name} {s.start_year}+"
                            f"{s.n_times} months")
    shared = set(train.member_ids) & set(population.member_ids)
    if shared:
        raise DataError(f"population contains training member(s) {sorted(shared)}")


def evaluate_ensembles(boosted, population, train, cfg, provenance=None):
    """Full diagnostic battery of boosted and training data against the population."""
    ec = cfg["eval"]
    _check_inputs(boosted, population, train)
    datasets = {"population": population, "boosted": boosted, "train": train}
    report = EvalReport(provenance=dict(provenance or {}))
    report.provenance.update({
        "config_hash": cfgmod.config_hash(cfg),
        "eval": ec,
        "conventions": {
            "quantiles": "linear interpolation of order statistics (type 7)",
            "std": "population (divide by n)",
            "DJF": "Dec(y-1), Jan(y), Feb(y); first incomplete winter dropped",
            "anomalies": "each dataset relative to its own monthly climatology",
            "composite_thresholds": "percentiles of each dataset's own detrended index",
        },
    })

    anoms = {}
    for name, s in datasets.items():
        a = ev.compute_anomalies(s, ec["ref_years"])
        if ec["years"] is not None:
            a = a.select_years(*ec["years"])
        anoms[name] = a
    first = anoms["population"]
    lat, lon = first.lat, first.lon
    report.provenance["years"] = [first.start_year, first.start_year + first.n_years]
    nq = ec["n_quantiles"]
    compared = ("boosted", "train")

    # global distributions
    flat = {n: a.values.ravel() for n, a in anoms.items()}
    for n in compared:
        report.add(f"qq_global_{n}", ev.qq_curve(flat["population"], flat[n], nq))
        report.add(f"qq_slope_global_{n}",
                   Scalar(ev.qq_slope(flat["population"], flat[n], ec["qq_inner"], nq)))
    edges = ev.histogram_edges(list(flat.values()), ec["n_bins"])
    for n, v in flat.items():
        report.add(f"pdf_global_{n}", ev.log_pdf_histogram(v, edges))

    # named locations
    locations = ec["locations"]
    if locations is None:
        locations = cfgmod.CITIES if is_global_grid(lat, lon) else []
    loc_prov = []
    for loc in locations:
        i, j = ev.nearest_cell(loc["lat"], loc["lon"], lat, lon)
        label = _safe(loc["label"])
        loc_prov.append({"label": label, "cell": [i, j],
                         "cell_lat": float(lat[i]), "cell_lon": float(lon[j])})
        series = {n: a.values[:, :, i, j].ravel() for n, a in anoms.items()}
        for n in compared:
            report.add(f"qq_{label}_{n}", ev.qq_curve(series["population"], series[n], nq))
        loc_edges = ev.histogram_edges(list(series.values()), ec["n_bins"])
        for n, v in series.items():
            report.add(f"pdf_{label}_{n}", ev.log_pdf_histogram(v, loc_edges))
    report.provenance["locations"] = loc_prov

    # spectra of seasonal mean anomaly maps
    for season in ec["seasons"]:
        for n, a in anoms.items():
            maps = ev.seasonal_mean_maps(a, season)
            rp = ev.mean_rapsd(maps.reshape(-1, *a.grid_shape), lon)
            report.add(f"rapsd_{season.lower()}_{n}", rp.curve())
        report.add(f"rapsd_wavelength_km_{season.lower()}",
                   ev.Curve(rp.wavenumber, rp.wavelength_km))

    # per-cell maps
    p = ec["percentile"]
    ptag = "p" + format(p * 100, "g").replace(".", "_")
    maps = {}
    for n, a in anoms.items():
        mm = ev.moment_maps(a)
        mm[ptag] = ev.percentile_map(a, p)
        maps[n] = mm
        for metric, values in mm.items():
            report.add(f"{metric}_{n}", Map(values, lat, lon))
    for n in compared:
        for metric in ("std", "skew", "exkurt", ptag):
            report.add(f"corr_{metric}_{n}", Scalar(ev.pattern_correlation(
                maps[n][metric], maps["population"][metric], lat)))
            report.add(f"rmse_{metric}_{n}", Scalar(ev.rmse(
                maps[n][metric], maps["population"][metric], lat)))

    # ENSO-style index
    ib = (resolve_index_lat(ec["index_lat"], lat), ec["index_lon"])
    report.provenance["index_region"] = {"lat": list(ib[0]), "lon": list(ib[1])}
    index = {n: ev.region_index(a, *ib) for n, a in anoms.items()}
    for n in compared:
        report.add(f"qq_index_{n}", ev.qq_curve(index["population"].values,
                                                index[n].values, nq))
    idx_edges = ev.histogram_edges([i.values for i in index.values()], min(ec["n_bins"], 41))
    for n, ix in index.items():
        report.add(f"pdf_index_{n}", ev.log_pdf_histogram(ix.values, idx_edges))
        report.add(f"index_std_{n}", ev.seasonal_index_std(ix))

    # detrended composites
    detr = {n: ev.detrend_per_month(a) for n, a in anoms.items()}
    dindex = {n: ev.region_index(d, *ib) for n, d in detr.items()}
    specs = []
    for q in ec["composite_percentiles"]:
        specs.append((f"p{format(q * 100, 'g')}", ev.ThresholdSpec("percentile", q)))
    if ec["composite_train_max"]:
        specs.append(("trainmax", ev.ThresholdSpec("reference_extreme",
                                                   reference=dindex["train"])))
    if ec["la_nina"]:
        for q in ec["composite_percentiles"]:
            specs.append((f"p{format((1 - q) * 100, 'g')}_below",
                          ev.ThresholdSpec("percentile", 1 - q, "below")))
        if ec["composite_train_max"]:
            specs.append(("trainmin", ev.ThresholdSpec("reference_extreme", None, "below",
                                                       dindex["train"])))
    empty = []
    for tag, spec in specs:
        tag = tag.replace(".", "_")
        comps = {}
        for n in ("population", "boosted"):
            try:
                c = ev.threshold_composite(detr[n], dindex[n], spec)
            except ev.EmptyCompositeError:
                report.add(f"comp_count_{tag}_{n}", Scalar(0))
                empty.append(f"{tag}_{n}")
                continue
            comps[n] = c
            report.add(f"comp_{tag}_{n}", Map(c.values, lat, lon))
            report.add(f"comp_count_{tag}_{n}", Scalar(c.count))
            report.add(f"comp_threshold_{tag}_{n}", Scalar(c.threshold))
        if len(comps) == 2:
            a, b = comps["boosted"].values, comps["population"].values
            try:
                report.add(f"corr_comp_{tag}_boosted", Scalar(ev.pattern_correlation(a, b, lat)))
            except DataError:
                pass
            report.add(f"rmse_comp_{tag}_boosted", Scalar(ev.rmse(a, b, lat)))
    report.provenance["empty_composites"] = empty
    return report


def evaluate_stage(cfg, boosted_path, population_path, train_path, out_dir, member=None):
    from .report import write_report

    boosted = read_field_series(boosted_path)
    population = read_field_series(population_path)
    train_all = read_field_series(train_path)
    if train_all.n_members > 1:
        idx = cfg["data"]["train_member"] if member is None else member
        if not 0 <= idx < train_all.n_members:
            raise ConfigError(f"training member index {idx} outside 0..{train_all.n_members - 1}")
        train_all = train_all.select_members([idx])
    prov = {"inputs": {"boosted": file_sha256(boosted_path),
                       "population": file_sha256(population_path),
                       "train": file_sha256(train_path)}}
    if population_path == boosted_path or prov["inputs"]["boosted"] == prov["inputs"]["population"]:
        boosted = population
    report = evaluate_ensembles(boosted, population, train_all, cfg, prov)
    write_report(report, out_dir, map_pngs=cfg["eval"]["map_pngs"])
    if cfg["eval"]["figures"]:
        from .plotting import render_report_figures
        render_report_figures(report, os.path.join(out_dir, "figures"))
    return report


def subset_stage(in_path, out_path, members=None, exclude=None):
    series = read_field_series(in_path)
    if members is not None:
        idx = [series.member_index(m) if not str(m).isdigit() else int(m) for m in members]
    else:
        idx = list(range(series.n_members))
    if exclude:
        drop = {series.member_index(m) for m in exclude}
        idx = [i for i in idx if i not in drop]
    if not idx:
        raise ConfigError("member selection is empty")
    out = series.select_members(idx)
    write_field_series(out, out_path)
    return out


def pipeline_stage(cfg, workdir, threads=1):
    """synthesize -> split -> train -> generate -> evaluate inside ``workdir``."""
    os.makedirs(workdir, exist_ok=True)
    p = {k: os.path.join(workdir, v) for k, v in {
        "ensemble": "ensemble.ens", "population": "population.ens", "train": "train.ens",
        "ckpt": "model.ckpt", "boosted": "boosted.ens", "report": "report"}.items()}
    series = synthesize(cfg, p["ensemble"])
    member = cfg["data"]["train_member"]
    if not 0 <= member < series.n_members:
        raise ConfigError(f"training member index {member} outside 0..{series.n_members - 1}")
    subset_stage(p["ensemble"], p["train"], members=[member])
    subset_stage(p["ensemble"], p["population"], exclude=[series.member_ids[member]])
    train_stage(cfg, p["train"], p["ckpt"], member=0)
    generate_stage(cfg, p["ckpt"], p["train"], p["boosted"], threads=threads)
    evaluate_stage(cfg, p["boosted"], p["population"], p["train"], p["report"])
    return p

