"""Ensemble diagnostics: anomalies, distributions, spectra, maps and ENSO-style indices.

Conventions used throughout:

* quantiles use linear interpolation between order statistics (numpy's
  default ``linear`` method, Hyndman-Fan type 7);
* standard deviations and central moments divide by ``n``;
* area weights are ``cos(lat)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import MONTHS, FieldSeries
from .errors import DataError, EmptyCompositeError, InsufficientDataError, ShapeError
from .report import Curve, Histogram, Map

EARTH_RADIUS_KM = 6371.0

SEASONS = {"DJF": (11, 0, 1), "MAM": (2, 3, 4), "JJA": (5, 6, 7), "SON": (8, 9, 10)}


@dataclass
class AnomalySeries(FieldSeries):
    ref_years: tuple = ()
    ref_members: tuple = ()


@dataclass
class IndexSeries:
    values: np.ndarray  # (member, time)
    start_year: int
    member_ids: list
    lat_bounds: tuple
    lon_bounds: tuple
    weighting: str = "coslat"
    attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] % MONTHS:
            raise ShapeError(f"index values must be (member, whole years of months), "
                             f"got {self.values.shape}")

    def by_year(self):
        m, t = self.values.shape
        return self.values.reshape(m, t // MONTHS, MONTHS)


def area_weights(lat, shape=None):
    w = np.cos(np.deg2rad(np.asarray(lat, dtype=np.float64)))
    w = np.clip(w, 0.0, None)
    if shape is not None:
        w = np.broadcast_to(w[:, None], shape)
    return w


# --------------------------------------------------------------------------
# anomalies

def monthly_climatology(series, ref_years=None, ref_members=None):
    if ref_years is not None:
        ref = series.select_years(*ref_years)
    else:
        ref = series
    x = ref.by_year()
    if ref_members is not None:
        x = x[list(ref_members)]
    if x.shape[0] == 0 or x.shape[1] == 0:
        raise InsufficientDataError("climatology reference set is empty")
    return x.mean(axis=(0, 1))  # (12, H, W)


def compute_anomalies(series, ref_years=None, ref_members=None):
    """Departures from the monthly climatology of a reference member/year set."""
    clim = monthly_climatology(series, ref_years, ref_members)
    x = series.by_year() - clim
    if ref_years is None:
        ref_years = (series.start_year, series.start_year + series.n_years)
    if ref_members is None:
        ref_members = range(series.n_members)
    return AnomalySeries(x.reshape(series.shape), series.lat, series.lon, series.start_year,
                         series.member_ids, dict(series.attrs),
                         ref_years=tuple(int(y) for y in ref_years),
                         ref_members=tuple(int(m) for m in ref_members))


def pooled(series):
    return np.asarray(series.values if hasattr(series, "values") else series).ravel()


def pooled_cells(series):
    """(member*time, H, W) stack of maps."""
    v = series.values
    return v.reshape(-1, *v.shape[2:])


# --------------------------------------------------------------------------
# distributions

def quantile_probabilities(n_quantiles):
    if n_quantiles < 1:
        raise ValueError("n_quantiles must be >= 1")
    return np.arange(1, n_quantiles + 1) / (n_quantiles + 1.0)


def qq_curve(sample_a, sample_b, n_quantiles=99):
    """Matched quantiles: x from ``sample_a``, y from ``sample_b``."""
    a = np.asarray(sample_a, dtype=np.float64).ravel()
    b = np.asarray(sample_b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise InsufficientDataError("QQ curve needs two non-empty samples")
    p = quantile_probabilities(n_quantiles)
    return Curve(np.quantile(a, p), np.quantile(b, p))


def qq_slope(reference, sample, inner=0.98, n_quantiles=99):
    """Least-squares slope of ``sample`` quantiles on ``reference`` quantiles.

    Quantiles are taken at ``n_quantiles`` evenly spaced probabilities
    spanning the central ``inner`` fraction.
    """
    lo = 0.5 * (1.0 - inner)
    p = np.linspace(lo, 1.0 - lo, n_quantiles)
    qa = np.quantile(np.asarray(reference, dtype=np.float64).ravel(), p)
    qb = np.quantile(np.asarray(sample, dtype=np.float64).ravel(), p)
    slope, _ = np.polyfit(qa, qb, 1)
    return float(slope)


def histogram_edges(samples, n_bins=101):
    """Uniform edges spanning the union of ``samples``."""
    lo = min(float(np.min(s)) for s in samples)
    hi = max(float(np.max(s)) for s in samples)
    if hi <= lo:
        hi = lo + 1.0
    return np.linspace(lo, hi, n_bins + 1)


def log_pdf_histogram(sample, bin_edges):
    """Density-normalized histogram; empty bins stay zero."""
    edges = np.asarray(bin_edges, dtype=np.float64)
    if edges.ndim != 1 or len(edges) < 2 or not np.all(np.diff(edges) > 0):
        raise DataError("histogram bin edges must be strictly increasing")
    s = np.asarray(sample, dtype=np.float64).ravel()
    if s.size == 0:
        raise InsufficientDataError("histogram of an empty sample")
    density, _ = np.histogram(s, bins=edges, density=True)
    return Histogram(edges, density)


# --------------------------------------------------------------------------
# spectra

@dataclass
class Rapsd:
    wavenumber: np.ndarray  # radial bin centres 1, 2, ...
    power: np.ndarray  # mean |F|^2 per bin
    counts: np.ndarray  # Fourier coefficients per bin
    dc_power: float
    wavelength_km: np.ndarray

    def curve(self):
        return Curve(self.wavenumber, self.power)


def radial_bins(h, w):
    """Integer radial bin of every (unshifted) 2-D FFT coefficient."""
    ky = np.fft.fftfreq(h) * h
    kx = np.fft.fftfreq(w) * w
    r = np.sqrt(ky[:, None] ** 2 + kx[None, :] ** 2)
    return np.floor(r + 0.5).astype(int)


def zonal_domain_km(lon):
    """Length of the zonal domain at the equator (mean grid spacing x W)."""
    w = len(lon)
    dlon = 360.0 / w if w < 2 else float(np.mean(np.diff(np.asarray(lon))))
    return 2.0 * math.pi * EARTH_RADIUS_KM * dlon / 360.0 * w


def rapsd(field_map, lon=None):
    """Radially averaged power spectrum of an H x W map.

    Power is ``|F|^2`` of the unnormalized 2-D DFT, so by Parseval the
    count-weighted sum over the non-DC bins equals ``H*W*sum((x - mean)^2)``.
    """
    x = np.asarray(field_map, dtype=np.float64)
    if x.ndim != 2 or not np.all(np.isfinite(x)):
        raise DataError("RAPSD needs a finite 2-D map")
    h, w = x.shape
    power = np.abs(np.fft.fft2(x)) ** 2
    bins = radial_bins(h, w)
    nb = int(bins.max()) + 1
    counts = np.bincount(bins.ravel(), minlength=nb)
    sums = np.bincount(bins.ravel(), weights=power.ravel(), minlength=nb)
    keep = np.arange(1, nb)[counts[1:] > 0]
    k = keep.astype(np.float64)
    length = zonal_domain_km(lon if lon is not None else np.arange(w) * 360.0 / w)
    return Rapsd(k, sums[keep] / counts[keep], counts[keep], float(power[0, 0]), length / k)


def mean_rapsd(maps, lon=None):
    """Average RAPSD over a stack of maps (n, H, W)."""
    maps = np.asarray(maps, dtype=np.float64)
    if len(maps) == 0:
        raise InsufficientDataError("no maps for RAPSD")
    results = [rapsd(m, lon) for m in maps]
    first = results[0]
    return Rapsd(first.wavenumber, np.mean([r.power for r in results], axis=0), first.counts,
                 float(np.mean([r.dc_power for r in results])), first.wavelength_km)


def seasonal_mean_maps(series, season="DJF"):
    """Seasonal means per member and season-year: (member, n_seasons, H, W).

    Seasons that wrap the year end (DJF) take December from the previous
    year, so the first incomplete winter is dropped.
    """
    months = SEASONS[season] if isinstance(season, str) else tuple(season)
    x = series.by_year()
    wraps = any(b < a for a, b in zip(months[:-1], months[1:]))
    if not wraps:
        return x[:, :, list(months)].mean(axis=2)
    split = next(i for i in range(1, len(months)) if months[i] < months[i - 1])
    prev, cur = list(months[:split]), list(months[split:])
    if x.shape[1] < 2:
        raise InsufficientDataError(f"{season} needs at least two years")
    parts = np.concatenate([x[:, :-1][:, :, prev], x[:, 1:][:, :, cur]], axis=2)
    return parts.mean(axis=2)


# --------------------------------------------------------------------------
# per-cell maps

def moment_maps(anoms):
    """Per-cell std, skewness and excess kurtosis pooled over members and time."""
    x = pooled_cells(anoms)
    if len(x) < 4:
        raise InsufficientDataError(f"need >= 4 pooled values per cell, have {len(x)}")
    d = x - x.mean(axis=0)
    m2 = np.mean(d ** 2, axis=0)
    m3 = np.mean(d ** 3, axis=0)
    m4 = np.mean(d ** 4, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        skew = np.where(m2 > 0, m3 / m2 ** 1.5, np.nan)
        exkurt = np.where(m2 > 0, m4 / m2 ** 2 - 3.0, np.nan)
    return {"std": np.sqrt(m2), "skew": skew, "exkurt": exkurt}


def percentile_map(anoms, p, per_month=False):
    """Per-cell empirical quantile at probability ``p`` in (0, 1)."""
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie strictly between 0 and 1")
    if anoms.values.size == 0:
        raise InsufficientDataError("percentile of an empty pool")
    if per_month:
        x = anoms.by_year()
        x = np.moveaxis(x, 2, 0).reshape(MONTHS, -1, *anoms.grid_shape)
        return np.quantile(x, p, axis=1)
    return np.quantile(pooled_cells(anoms), p, axis=0)


def _weighted_pair(map_a, map_b, lat):
    a = np.asarray(map_a, dtype=np.float64)
    b = np.asarray(map_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] != len(lat):
        raise ShapeError(f"maps {a.shape} and {b.shape} are not on the same grid")
    w = area_weights(lat, a.shape)
    ok = np.isfinite(a) & np.isfinite(b) & (w > 0)
    return a[ok], b[ok], w[ok]


def pattern_correlation(map_a, map_b, lat):
    """Area-weighted centred Pearson correlation (non-finite cells ignored)."""
    a, b, w = _weighted_pair(map_a, map_b, lat)
    if a.size == 0:
        raise DataError("maps share no finite cells")
    w = w / w.sum()
    da = a - np.sum(w * a)
    db = b - np.sum(w * b)
    va, vb = np.sum(w * da * da), np.sum(w * db * db)
    if va <= 0 or vb <= 0:
        raise DataError("pattern correlation undefined for a zero-variance map")
    return float(np.sum(w * da * db) / math.sqrt(va * vb))


def rmse(map_a, map_b, lat):
    a, b, w = _weighted_pair(map_a, map_b, lat)
    if a.size == 0:
        raise DataError("maps share no finite cells")
    return float(math.sqrt(np.sum(w * (a - b) ** 2) / w.sum()))


# --------------------------------------------------------------------------
# indices and composites

def region_mask(lat, lon, lat_bounds, lon_bounds):
    lat = np.asarray(lat)
    lon = np.asarray(lon) % 360.0
    lat_ok = (lat >= min(lat_bounds)) & (lat <= max(lat_bounds))
    if lon_bounds[1] - lon_bounds[0] >= 360.0:
        lon_ok = np.ones(lon.shape, bool)
    else:
        lo, hi = lon_bounds[0] % 360.0, lon_bounds[1] % 360.0
        lon_ok = (lon >= lo) & (lon <= hi) if lo <= hi else (lon >= lo) | (lon <= hi)
    return lat_ok[:, None] & lon_ok[None, :]


def region_index(anoms, lat_bounds=(-5.0, 5.0), lon_bounds=(-170.0, -120.0)):
    """cos(lat)-weighted mean over cells whose centres fall in the box."""
    mask = region_mask(anoms.lat, anoms.lon, lat_bounds, lon_bounds)
    if not mask.any():
        raise DataError(f"region lat {lat_bounds} lon {lon_bounds} contains no grid cells")
    w = area_weights(anoms.lat, mask.shape) * mask
    if w.sum() <= 0:
        raise DataError("region has zero total area weight")
    values = np.tensordot(anoms.values, w, axes=([2, 3], [0, 1])) / w.sum()
    return IndexSeries(values, anoms.start_year, list(anoms.member_ids),
                       tuple(lat_bounds), tuple(lon_bounds))


def detrend_per_month(anoms):
    """Remove an OLS line in year from each member, cell and calendar month."""
    x = anoms.by_year()
    n_years = x.shape[1]
    if n_years < 3:
        raise InsufficientDataError(f"detrending needs >= 3 years, have {n_years}")
    yc = np.arange(n_years, dtype=np.float64)
    yc -= yc.mean()
    yc = yc.reshape(1, -1, 1, 1, 1)
    mean = x.mean(axis=1, keepdims=True)
    slope = np.sum(yc * (x - mean), axis=1, keepdims=True) / np.sum(yc * yc)
    resid = x - mean - slope * yc
    return anoms.with_values(resid.reshape(anoms.shape))


def seasonal_index_std(index):
    """Population std per calendar month, pooled over members and years."""
    x = index.by_year()
    if x.shape[0] * x.shape[1] < 2:
        raise InsufficientDataError("need >= 2 samples per calendar month")
    return Curve(np.arange(1, MONTHS + 1, dtype=np.float64), x.std(axis=(0, 1)))


@dataclass
class ThresholdSpec:
    """Which index values enter a composite.

    ``kind`` is ``"percentile"`` (``value`` is a probability of the
    composited index itself), ``"absolute"`` (``value`` in index units) or
    ``"reference_extreme"`` (max of ``reference``, or min when
    ``direction="below"``).
    """

    kind: str = "percentile"
    value: float | None = None
    direction: str = "above"
    reference: IndexSeries | None = None

    def threshold(self, index):
        if self.kind == "percentile":
            return float(np.quantile(index.values, self.value))
        if self.kind == "absolute":
            return float(self.value)
        if self.kind == "reference_extreme":
            ref = self.reference.values
            return float(ref.max() if self.direction == "above" else ref.min())
        raise ValueError(f"unknown threshold kind {self.kind!r}")


@dataclass
class Composite:
    values: np.ndarray
    count: int
    threshold: float


def threshold_composite(anoms, index, spec):
    """Mean anomaly map over (member, time) where the index passes the threshold."""
    if index.values.shape != anoms.values.shape[:2]:
        raise ShapeError(f"index shape {index.values.shape} not aligned with anomalies "
                         f"{anoms.values.shape[:2]}")
    thr = spec.threshold(index)
    if spec.direction == "above":
        sel = index.values > thr
    elif spec.direction == "below":
        sel = index.values < thr
    else:
        raise ValueError(f"direction must be 'above' or 'below', got {spec.direction!r}")
    count = int(sel.sum())
    if count == 0:
        raise EmptyCompositeError(f"no events {spec.direction} threshold {thr:.4g}", count=0)
    return Composite(anoms.values[sel].mean(axis=0), count, thr)


def nearest_cell(lat, lon, lat_grid, lon_grid):
    """Grid indices of the cell centre closest to (lat, lon); ties go to the lower index."""
    i = int(np.argmin(np.abs(np.asarray(lat_grid) - lat)))
    dlon = np.abs((np.asarray(lon_grid) - lon + 180.0) % 360.0 - 180.0)
    j = int(np.argmin(dlon))
    return i, j


def as_map(values, series):
    return Map(values, series.lat, series.lon)
