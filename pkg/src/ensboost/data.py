"""Gridded monthly ensembles: storage, standardization and synthetic data.

A :class:`FieldSeries` holds values indexed ``(member, time, lat, lon)``.
Time is monthly and always starts in January of ``start_year``, so month
``t`` has calendar month ``t % 12`` (0 = January). Latitudes run south to
north.

The ``.ens`` file layout (all integers little-endian)::

    bytes 0-3    magic  b"ENSB"
    bytes 4-7    uint32 format version (1)
    bytes 8-15   uint64 header length L
    bytes 16..   L bytes of UTF-8 JSON header:
                 {"dims": [M, T, H, W], "lat": [...], "lon": [...],
                  "start_year": int, "months_per_year": 12,
                  "member_ids": [...], "attrs": {...}}
    then         M*T*H*W float64 little-endian values, row-major
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import ConfigError, FormatError, InsufficientDataError, ShapeError

MONTHS = 12
ENS_MAGIC = b"ENSB"
ENS_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
STD_FLOOR = 1e-6


@dataclass
class FieldSeries:
    values: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    start_year: int
    member_ids: list
    attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.lat = np.asarray(self.lat, dtype=np.float64)
        self.lon = np.asarray(self.lon, dtype=np.float64)
        self.member_ids = [str(m) for m in self.member_ids]
        self.start_year = int(self.start_year)
        if self.values.ndim != 4:
            raise ShapeError(f"values must be (member, time, lat, lon), got {self.values.shape}")
        m, t, h, w = self.values.shape
        if t % MONTHS:
            raise ShapeError(f"time length {t} is not a whole number of years")
        if self.lat.shape != (h,) or self.lon.shape != (w,):
            raise ShapeError(f"grid {self.lat.shape}x{self.lon.shape} does not match "
                             f"values {self.values.shape}")
        if len(self.member_ids) != m:
            raise ShapeError(f"{len(self.member_ids)} member ids for {m} members")
        if len(set(self.member_ids)) != m:
            raise ShapeError("member ids must be unique")
        if h > 1 and not np.all(np.diff(self.lat) > 0):
            raise ShapeError("latitudes must be strictly increasing (south to north)")
        if w > 1 and not np.all(np.diff(self.lon) > 0):
            raise ShapeError("longitudes must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise ShapeError("field values must be finite")

    @property
    def shape(self):
        return self.values.shape

    @property
    def n_members(self):
        return self.values.shape[0]

    @property
    def n_times(self):
        return self.values.shape[1]

    @property
    def n_years(self):
        return self.values.shape[1] // MONTHS

    @property
    def grid_shape(self):
        return self.values.shape[2:]

    @property
    def years(self):
        return np.arange(self.start_year, self.start_year + self.n_years)

    @property
    def months(self):
        return np.arange(self.n_times) % MONTHS

    def by_year(self):
        """View of the values as ``(member, year, month, lat, lon)``."""
        m, t, h, w = self.values.shape
        return self.values.reshape(m, t // MONTHS, MONTHS, h, w)

    def with_values(self, values, **changes):
        return replace(self, values=values, **changes)

    def same_grid(self, other):
        return (self.grid_shape == other.grid_shape
                and np.array_equal(self.lat, other.lat)
                and np.array_equal(self.lon, other.lon))

    def check_grid(self, other, what="series"):
        if not self.same_grid(other):
            raise ShapeError(f"{what} grid mismatch: {self.grid_shape} vs {other.grid_shape}")

    def select_members(self, indices):
        indices = list(indices)
        for i in indices:
            if not 0 <= i < self.n_members:
                raise IndexError(f"member index {i} outside 0..{self.n_members - 1}")
        return replace(self, values=self.values[indices],
                       member_ids=[self.member_ids[i] for i in indices],
                       attrs=dict(self.attrs))

    def member_index(self, member_id):
        try:
            return self.member_ids.index(str(member_id))
        except ValueError:
            raise KeyError(f"member {member_id!r} not in series") from None

    def select_years(self, start, stop):
        """Calendar years ``start <= year < stop``."""
        first, last = self.start_year, self.start_year + self.n_years
        if not first <= start <= stop <= last:
            raise ConfigError(f"years [{start}, {stop}) outside series years [{first}, {last})")
        i0, i1 = (start - first) * MONTHS, (stop - first) * MONTHS
        return replace(self, values=self.values[:, i0:i1], start_year=start,
                       attrs=dict(self.attrs))


def concat_time(parts):
    """Join consecutive-in-time series along the time axis."""
    parts = list(parts)
    head = parts[0]
    for prev, nxt in zip(parts[:-1], parts[1:]):
        head.check_grid(nxt)
        if nxt.start_year != prev.start_year + prev.n_years:
            raise ConfigError("series are not contiguous in time")
        if nxt.member_ids != head.member_ids:
            raise ConfigError("series have different members")
    return replace(head, values=np.concatenate([p.values for p in parts], axis=1))


# --------------------------------------------------------------------------
# .ens I/O

def write_field_series(series, path):
    header = {
        "dims": list(series.values.shape),
        "lat": series.lat.tolist(),
        "lon": series.lon.tolist(),
        "start_year": series.start_year,
        "months_per_year": MONTHS,
        "member_ids": list(series.member_ids),
        "attrs": series.attrs,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = np.ascontiguousarray(series.values, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(ENS_MAGIC, ENS_VERSION, len(blob)))
        fh.write(blob)
        fh.write(payload)


def read_field_series(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    return parse_field_series(raw)


def parse_field_series(raw):
    if len(raw) < _PREFIX.size:
        raise FormatError(f"file too short for .ens prefix ({len(raw)} bytes)", 0)
    magic, version, hlen = _PREFIX.unpack_from(raw, 0)
    if magic != ENS_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != ENS_VERSION:
        raise FormatError(f"unsupported .ens version {version}", 4)
    start = _PREFIX.size
    if start + hlen > len(raw):
        raise FormatError(f"header length {hlen} runs past end of file", 8)
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
        dims = [int(d) for d in header["dims"]]
        lat, lon = header["lat"], header["lon"]
        start_year = int(header["start_year"])
        member_ids = header["member_ids"]
        attrs = header.get("attrs", {})
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed header: {exc}", start) from None
    if len(dims) != 4 or min(dims) < 0:
        raise FormatError(f"header dims must be 4 non-negative integers, got {dims}", start)
    if header.get("months_per_year", MONTHS) != MONTHS:
        raise FormatError("only 12-month calendars are supported", start)
    off = start + hlen
    expected = 8 * math.prod(dims)
    if len(raw) - off != expected:
        raise FormatError(f"payload has {len(raw) - off} bytes but header dims {dims} "
                          f"need {expected}", off)
    values = np.frombuffer(raw, dtype="<f8", offset=off).reshape(dims).astype(np.float64)
    bad = np.flatnonzero(~np.isfinite(values.ravel()))
    if bad.size:
        raise FormatError("non-finite value in payload", off + 8 * int(bad[0]))
    try:
        return FieldSeries(values, lat, lon, start_year, member_ids, attrs)
    except ShapeError as exc:
        raise FormatError(f"inconsistent header: {exc}", start) from None


def csv_to_field_series(path, attrs=None):
    """Build a series from long-format CSV.

    Columns: ``member_id,year,month,lat,lon,value`` with ``month`` in 1..12.
    Every (member, year, month, lat, lon) combination on the implied grid
    must appear exactly once, and years must be contiguous.
    """
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"member_id", "year", "month", "lat", "lon", "value"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise FormatError(f"CSV must have columns {sorted(need)}", 0)
        for line, row in enumerate(reader, start=2):
            try:
                rows.append((row["member_id"], int(row["year"]), int(row["month"]),
                             float(row["lat"]), float(row["lon"]), float(row["value"])))
            except ValueError as exc:
                raise FormatError(f"line {line}: {exc}") from None
    if not rows:
        raise FormatError("CSV has no data rows", 0)
    members = list(dict.fromkeys(r[0] for r in rows))
    years = sorted({r[1] for r in rows})
    lats = sorted({r[3] for r in rows})
    lons = sorted({r[4] for r in rows})
    if years != list(range(years[0], years[-1] + 1)):
        raise FormatError("CSV years are not contiguous")
    mi = {m: i for i, m in enumerate(members)}
    li = {v: i for i, v in enumerate(lats)}
    oi = {v: i for i, v in enumerate(lons)}
    shape = (len(members), len(years) * MONTHS, len(lats), len(lons))
    values = np.full(shape, np.nan)
    for mem, yr, mon, la, lo, val in rows:
        if not 1 <= mon <= MONTHS:
            raise FormatError(f"month {mon} outside 1..12")
        values[mi[mem], (yr - years[0]) * MONTHS + mon - 1, li[la], oi[lo]] = val
    if np.isnan(values).any():
        raise FormatError(f"CSV is missing {int(np.isnan(values).sum())} grid values")
    return FieldSeries(values, lats, lons, years[0], members, dict(attrs or {}))


# --------------------------------------------------------------------------
# standardization

@dataclass
class Normalizer:
    monthly_mean: np.ndarray  # (12, H, W)
    monthly_std: np.ndarray  # (12, H, W)
    std_floor: float = STD_FLOOR


def fit_normalizer(series, member_index=0, year_range=None, std_floor=STD_FLOOR):
    """Per-cell monthly mean and population std of one member over ``year_range``.

    ``year_range`` is a half-open pair of calendar years; ``None`` uses the
    whole series.
    """
    if year_range is not None:
        series = series.select_years(*year_range)
    if series.n_years < 2:
        raise InsufficientDataError(
            f"need at least 2 training years for a climatology, got {series.n_years}")
    x = series.by_year()[member_index]  # (Y, 12, H, W)
    mean = x.mean(axis=0)
    std = np.maximum(x.std(axis=0), std_floor)
    return Normalizer(mean, std, std_floor)


def _check_normalizer(series, norm):
    if norm.monthly_mean.shape[1:] != series.grid_shape:
        raise ShapeError(f"normalizer grid {norm.monthly_mean.shape[1:]} does not match "
                         f"series grid {series.grid_shape}")


def standardize(series, norm):
    _check_normalizer(series, norm)
    x = (series.by_year() - norm.monthly_mean) / norm.monthly_std
    return series.with_values(x.reshape(series.shape))


def destandardize(series, norm):
    _check_normalizer(series, norm)
    x = series.by_year() * norm.monthly_std + norm.monthly_mean
    return series.with_values(x.reshape(series.shape))


def split_train_validation(series, train_years, val_years):
    """Cut ``series`` into two half-open calendar-year ranges."""
    (a0, a1), (b0, b1) = train_years, val_years
    if a1 <= a0:
        raise ConfigError(f"training years {train_years} are empty")
    if b1 <= b0:
        raise ConfigError(f"validation years {val_years} are empty")
    if a0 < b1 and b0 < a1:
        raise ConfigError(f"training years {train_years} overlap validation years {val_years}")
    return series.select_years(a0, a1), series.select_years(b0, b1)


# --------------------------------------------------------------------------
# synthetic ensembles

SKEW_SHAPE = 0.5  # log-space std of the skewed noise component
NINO34_LAT = (-5.0, 5.0)
NINO34_LON = (190.0, 240.0)


def global_grid(h, w):
    """Cell-centred global grid, latitudes south to north, longitudes 0..360."""
    dlat = 180.0 / h
    lat = -90.0 + dlat * (np.arange(h) + 0.5)
    lon = (360.0 / w) * np.arange(w)
    return lat, lon


def _bump(lat, lon, lat0, lon0, dlat, dlon):
    dl = (lon[None, :] - lon0 + 180.0) % 360.0 - 180.0
    return np.exp(-0.5 * (((lat[:, None] - lat0) / dlat) ** 2 + (dl / dlon) ** 2))


def default_teleconnection_map(lat, lon):
    """ENSO-like loading pattern: warm central Pacific plus remote lobes."""
    return (1.0 * _bump(lat, lon, 0.0, 215.0, 12.0, 35.0)
            + 0.6 * _bump(lat, lon, 58.0, 220.0, 12.0, 25.0)
            - 0.5 * _bump(lat, lon, 32.0, 265.0, 10.0, 20.0)
            + 0.4 * _bump(lat, lon, -20.0, 30.0, 12.0, 20.0)
            + 0.4 * _bump(lat, lon, 10.0, 105.0, 12.0, 20.0))


@dataclass
class SyntheticConfig:
    grid: tuple = (16, 32)
    years: int = 40
    members: int = 20
    start_year: int = 1981
    trend_amplitude: float = 0.3  # K per decade
    oscillation_period: float = 45.0  # months
    oscillation_amplitude: float = 1.5  # K at map value 1
    oscillation_teleconnection_map: np.ndarray | None = None
    noise_length_scale: float = 1.5  # grid cells
    noise_std: float = 0.5  # K
    noise_lat_gradient: float = 1.5  # amplitude factor 1 + g*|sin(lat)|
    skew_factor: float = 0.3
    seasonal_amplitude: float = 12.0  # K
    seed: int = 0

    def validate(self):
        h, w = self.grid
        if h < 1 or w < 1:
            raise ConfigError(f"grid must be positive, got {self.grid}")
        if self.years < 1:
            raise ConfigError("years must be >= 1")
        if self.members < 1:
            raise ConfigError("members must be >= 1")
        if self.oscillation_period <= 0:
            raise ConfigError("oscillation_period must be positive")
        if self.noise_std < 0 or self.noise_length_scale < 0 or self.skew_factor < 0:
            raise ConfigError("noise_std, noise_length_scale and skew_factor must be >= 0")
        if self.oscillation_teleconnection_map is not None:
            tm = np.asarray(self.oscillation_teleconnection_map)
            if tm.shape != (h, w):
                raise ConfigError(f"teleconnection map shape {tm.shape} != grid {self.grid}")

    def teleconnection_map(self):
        lat, lon = global_grid(*self.grid)
        if self.oscillation_teleconnection_map is None:
            return default_teleconnection_map(lat, lon)
        return np.asarray(self.oscillation_teleconnection_map, dtype=np.float64)


def climatological_cycle(lat, lon, seasonal_amplitude=12.0):
    """(12, H, W) mean annual cycle in kelvin."""
    phi = np.deg2rad(lat)[:, None]
    lam = np.deg2rad(lon)[None, :]
    base = 288.0 - 40.0 * np.sin(phi) ** 2 + 2.0 * np.cos(phi) * np.cos(2.0 * lam)
    month = (np.arange(MONTHS) + 0.5)[:, None, None]
    season = -seasonal_amplitude * np.sin(phi)[None] * np.cos(2.0 * np.pi * month / MONTHS)
    return base[None] + season


def _smooth_unit_noise(rng, shape, length_scale):
    """Gaussian-kernel smoothed white noise with unit variance at every cell.

    Latitude is padded before filtering and cropped after, so boundary rows
    get the same variance as interior ones; longitude wraps.
    """
    if length_scale <= 0:
        return rng.standard_normal(shape)
    pad = int(math.ceil(4.0 * length_scale))
    h, w = shape[-2:]
    white = rng.standard_normal(shape[:-2] + (h + 2 * pad, w))
    sigma = (0,) * (len(shape) - 2) + (length_scale, length_scale)
    mode = ["nearest"] * (len(shape) - 1) + ["wrap"]
    smooth = ndimage.gaussian_filter(white, sigma=sigma, mode=mode)[..., pad:pad + h, :]
    impulse = np.zeros((2 * pad + 1, w))
    impulse[pad, w // 2] = 1.0
    k = ndimage.gaussian_filter(impulse, sigma=length_scale, mode=["constant", "wrap"])
    return smooth / math.sqrt(float((k * k).sum()))


def generate_synthetic_ensemble(config):
    """Climatology + trend + teleconnected oscillation + correlated noise.

    Members share the climatology, trend and loading map; they differ in
    the oscillation phase and the noise draws.
    """
    config.validate()
    h, w = config.grid
    lat, lon = global_grid(h, w)
    n_t = config.years * MONTHS
    t = np.arange(n_t, dtype=np.float64)
    clim = climatological_cycle(lat, lon, config.seasonal_amplitude)
    tmap = config.teleconnection_map()
    amp = 1.0 + config.noise_lat_gradient * np.abs(np.sin(np.deg2rad(lat)))[:, None]
    amp = np.broadcast_to(amp, (h, w))

    values = np.empty((config.members, n_t, h, w))
    trend = config.trend_amplitude * t / 120.0
    base = np.tile(clim, (config.years, 1, 1)) + trend[:, None, None]
    for m in range(config.members):
        rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(m,)))
        phase = rng.uniform(0.0, 2.0 * np.pi)
        osc = config.oscillation_amplitude * np.sin(2.0 * np.pi * t / config.oscillation_period
                                                    + phase)
        field_m = base + osc[:, None, None] * tmap
        if config.noise_std > 0:
            noise = _smooth_unit_noise(rng, (n_t, h, w), config.noise_length_scale)
            field_m = field_m + config.noise_std * amp * noise
            if config.skew_factor > 0:
                g = SKEW_SHAPE * _smooth_unit_noise(rng, (n_t, h, w), config.noise_length_scale)
                s2 = SKEW_SHAPE ** 2
                skewed = (np.exp(g) - math.exp(s2 / 2)) / math.sqrt(math.expm1(s2) * math.exp(s2))
                field_m = field_m + config.skew_factor * config.noise_std * amp * skewed
        values[m] = field_m
    ids = [f"m{m:03d}" for m in range(config.members)]
    return FieldSeries(values, lat, lon, config.start_year, ids,
                       {"source": "synthetic", "seed": int(config.seed)})
