"""Evaluation report container and its on-disk layout.

A report directory holds one file per entry plus ``manifest.json``::

    <dir>/manifest.json          {"entries": [{"name", "kind", "file"}, ...],
                                  "provenance": {...}}
    <dir>/<name>.csv             curve:     columns x,y
                                 histogram: columns left,right,density
                                 map:       first row  lat\\lon,<lon_1>,...,<lon_W>
                                            then rows  <lat_i>,<v_i1>,...,<v_iW>
    <dir>/<name>.json            scalar:    {"value": v}
    <dir>/maps/<name>.png        optional heatmap of every map entry
    <dir>/figures/*.png          optional summary figures

Floats are written with ``repr`` so a reload is exact.
"""

from __future__ import annotations

import io
import json
import os
import re
from dataclasses import dataclass, field

import numpy as np

_NAME = re.compile(r"^[A-Za-z0-9_.-]+$")


@dataclass
class Curve:
    x: np.ndarray
    y: np.ndarray
    kind = "curve"

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.x.shape != self.y.shape or self.x.ndim != 1:
            raise ValueError("curve x and y must be equal-length vectors")


@dataclass
class Map:
    values: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    kind = "map"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.lat = np.asarray(self.lat, dtype=np.float64)
        self.lon = np.asarray(self.lon, dtype=np.float64)
        if self.values.shape != (len(self.lat), len(self.lon)):
            raise ValueError("map values do not match lat/lon")


@dataclass
class Histogram:
    edges: np.ndarray
    density: np.ndarray
    kind = "histogram"

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.float64)
        self.density = np.asarray(self.density, dtype=np.float64)
        if self.edges.shape != (len(self.density) + 1,):
            raise ValueError("histogram needs one more edge than bins")


@dataclass
class Scalar:
    value: float
    kind = "scalar"

    def __post_init__(self):
        self.value = float(self.value)


ENTRY_TYPES = {"curve": Curve, "map": Map, "histogram": Histogram, "scalar": Scalar}


@dataclass
class EvalReport:
    entries: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def add(self, name, entry):
        if not _NAME.match(name):
            raise ValueError(f"report entry name {name!r} is not filesystem safe")
        if name in self.entries:
            raise ValueError(f"duplicate report entry {name!r}")
        self.entries[name] = entry
        return entry

    def __getitem__(self, name):
        return self.entries[name]

    def __contains__(self, name):
        return name in self.entries

    def names(self, kind=None):
        return [n for n, e in self.entries.items() if kind is None or e.kind == kind]


def _fmt(v):
    return repr(float(v))


def _write_rows(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def write_entry(entry, base):
    if entry.kind == "curve":
        _write_rows(base + ".csv", ["x", "y"], zip(entry.x, entry.y))
        return base + ".csv"
    if entry.kind == "histogram":
        _write_rows(base + ".csv", ["left", "right", "density"],
                    zip(entry.edges[:-1], entry.edges[1:], entry.density))
        return base + ".csv"
    if entry.kind == "map":
        with open(base + ".csv", "w") as fh:
            fh.write("lat\\lon," + ",".join(_fmt(v) for v in entry.lon) + "\n")
            for la, row in zip(entry.lat, entry.values):
                fh.write(_fmt(la) + "," + ",".join(_fmt(v) for v in row) + "\n")
        return base + ".csv"
    with open(base + ".json", "w") as fh:
        json.dump({"value": entry.value}, fh)
    return base + ".json"


def read_entry(kind, path):
    if kind == "scalar":
        with open(path) as fh:
            return Scalar(json.load(fh)["value"])
    with open(path) as fh:
        lines = fh.read().splitlines()
    if kind == "map":
        lon = [float(v) for v in lines[0].split(",")[1:]]
        rows = [[float(v) for v in line.split(",")] for line in lines[1:]]
        lat = [r[0] for r in rows]
        return Map(np.array([r[1:] for r in rows]).reshape(len(lat), len(lon)), lat, lon)
    rows = np.array([[float(v) for v in line.split(",")] for line in lines[1:]])
    if kind == "curve":
        rows = rows.reshape(-1, 2)
        return Curve(rows[:, 0], rows[:, 1])
    rows = rows.reshape(-1, 3)
    edges = np.append(rows[:, 0], rows[-1, 1]) if len(rows) else np.zeros(1)
    return Histogram(edges, rows[:, 2])


def write_report(report, out_dir, map_pngs=True):
    os.makedirs(out_dir, exist_ok=True)
    manifest = {"entries": [], "provenance": report.provenance}
    for name, entry in report.entries.items():
        path = write_entry(entry, os.path.join(out_dir, name))
        manifest["entries"].append({"name": name, "kind": entry.kind,
                                    "file": os.path.basename(path)})
        if map_pngs and entry.kind == "map" and np.isfinite(entry.values).any():
            os.makedirs(os.path.join(out_dir, "maps"), exist_ok=True)
            with open(os.path.join(out_dir, "maps", name + ".png"), "wb") as fh:
                fh.write(render_map_png(entry.values))
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return os.path.join(out_dir, "manifest.json")


def read_report(out_dir):
    with open(os.path.join(out_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    report = EvalReport(provenance=manifest.get("provenance", {}))
    for item in manifest["entries"]:
        report.add(item["name"], read_entry(item["kind"], os.path.join(out_dir, item["file"])))
    return report


def render_map_png(values, color_scale=None, cmap="RdBu_r", cell_pixels=4):
    """Bare heatmap PNG (one colour block per cell, north at the top).

    ``color_scale`` is ``(vmin, vmax)``; default is symmetric about zero
    when the map changes sign and the data range otherwise.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        values = np.where(np.isfinite(values), values, np.nanmean(values))
    if color_scale is None:
        lo, hi = float(values.min()), float(values.max())
        if lo < 0 < hi:
            hi = max(-lo, hi)
            lo = -hi
        color_scale = (lo, hi)
    big = np.kron(values, np.ones((cell_pixels, cell_pixels)))
    buf = io.BytesIO()
    plt.imsave(buf, big, vmin=color_scale[0], vmax=color_scale[1], cmap=cmap,
               origin="lower", format="png", metadata={"Software": None})
    return buf.getvalue()
