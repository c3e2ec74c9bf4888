"""Summary figures for an evaluation report (matplotlib, Agg backend)."""

from __future__ import annotations

import os

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

STYLE = {
    "population": dict(color="black", lw=1.8, label="population"),
    "boosted": dict(color="tab:red", lw=1.4, label="boosted"),
    "train": dict(color="tab:blue", lw=1.2, ls="--", label="train"),
}


def _figure(nrows=1, ncols=1, width=4.2, height=3.4):
    fig = Figure(figsize=(width * ncols, height * nrows))
    FigureCanvasAgg(fig)
    axes = fig.subplots(nrows, ncols, squeeze=False)
    return fig, axes


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=90, metadata={"Software": None})
    return path


def _qq(ax, report, prefix, title):
    lo, hi = np.inf, -np.inf
    for n in ("boosted", "train"):
        name = f"{prefix}_{n}"
        if name not in report:
            continue
        c = report[name]
        ax.plot(c.x, c.y, marker=".", ms=3, **STYLE[n])
        lo, hi = min(lo, c.x.min(), c.y.min()), max(hi, c.x.max(), c.y.max())
    if np.isfinite(lo):
        ax.plot([lo, hi], [lo, hi], color="0.6", lw=0.8)
    ax.set_xlabel("population quantile")
    ax.set_ylabel("sample quantile")
    ax.set_title(title)
    ax.legend(fontsize=7)


def _pdf(ax, report, prefix, title):
    for n in ("population", "boosted", "train"):
        name = f"{prefix}_{n}"
        if name not in report:
            continue
        h = report[name]
        centre = 0.5 * (h.edges[1:] + h.edges[:-1])
        dens = np.where(h.density > 0, h.density, np.nan)
        ax.plot(centre, dens, drawstyle="steps-mid", **STYLE[n])
    ax.set_yscale("log")
    ax.set_xlabel("anomaly")
    ax.set_ylabel("density")
    ax.set_title(title)
    ax.legend(fontsize=7)


def _map(ax, fig, m, title, vlim=None, cmap="RdBu_r"):
    v = m.values
    if vlim is None:
        lo, hi = np.nanmin(v), np.nanmax(v)
        if lo < 0 < hi:
            hi = max(-lo, hi)
            lo = -hi
        vlim = (lo, hi)
    mesh = ax.pcolormesh(m.lon, m.lat, v, vmin=vlim[0], vmax=vlim[1], cmap=cmap,
                         shading="nearest")
    fig.colorbar(mesh, ax=ax, shrink=0.8)
    ax.set_title(title, fontsize=9)
    ax.set_xlabel("lon")
    ax.set_ylabel("lat")


def render_report_figures(report, out_dir):
    """Write the standard figure set; returns the list of files written."""
    os.makedirs(out_dir, exist_ok=True)
    written = []

    fig, ax = _figure(1, 2)
    _qq(ax[0, 0], report, "qq_global", "anomaly QQ (all cells and months)")
    _pdf(ax[0, 1], report, "pdf_global", "anomaly PDF")
    written.append(_save(fig, os.path.join(out_dir, "distribution_global.png")))

    labels = sorted({n[3:-len("_boosted")] for n in report.names("curve")
                     if n.startswith("qq_") and n.endswith("_boosted")}
                    - {"global", "index"})
    if labels:
        fig, ax = _figure(2, len(labels))
        for j, label in enumerate(labels):
            _qq(ax[0, j], report, f"qq_{label}", label)
            _pdf(ax[1, j], report, f"pdf_{label}", label)
        written.append(_save(fig, os.path.join(out_dir, "distribution_locations.png")))

    seasons = sorted({n.split("_")[1] for n in report.names("curve")
                      if n.startswith("rapsd_") and not n.startswith("rapsd_wavelength")})
    if seasons:
        fig, ax = _figure(1, len(seasons))
        for j, s in enumerate(seasons):
            a = ax[0, j]
            for n in ("population", "boosted", "train"):
                name = f"rapsd_{s}_{n}"
                if name in report:
                    a.loglog(report[name].x, report[name].y, **STYLE[n])
            a.set_xlabel("radial wavenumber")
            a.set_ylabel("power")
            a.set_title(f"{s.upper()} mean anomaly spectrum")
            a.legend(fontsize=7)
        written.append(_save(fig, os.path.join(out_dir, "rapsd.png")))

    metrics = [m for m in ("std", "skew", "exkurt") if f"{m}_population" in report]
    metrics += sorted({n[:-len("_population")] for n in report.names("map")
                       if n.startswith("p") and n.endswith("_population")
                       and not n.startswith("pdf")})
    for metric in metrics:
        names = [n for n in ("population", "boosted", "train") if f"{metric}_{n}" in report]
        vals = np.concatenate([report[f"{metric}_{n}"].values.ravel() for n in names])
        lo, hi = np.nanmin(vals), np.nanmax(vals)
        cmap = "viridis" if lo >= 0 else "RdBu_r"
        if lo < 0 < hi:
            hi = max(-lo, hi)
            lo = -hi
        fig, ax = _figure(1, len(names), width=4.6, height=2.8)
        for j, n in enumerate(names):
            title = n
            if f"corr_{metric}_{n}" in report:
                title += (f"  rmse {report[f'rmse_{metric}_{n}'].value:.2f}"
                          f" (r {report[f'corr_{metric}_{n}'].value:.2f})")
            _map(ax[0, j], fig, report[f"{metric}_{n}"], title, (lo, hi), cmap)
        written.append(_save(fig, os.path.join(out_dir, f"map_{metric}.png")))

    if "qq_index_boosted" in report:
        fig, ax = _figure(1, 3)
        _qq(ax[0, 0], report, "qq_index", "index QQ")
        _pdf(ax[0, 1], report, "pdf_index", "index PDF")
        a = ax[0, 2]
        for n in ("population", "boosted", "train"):
            if f"index_std_{n}" in report:
                c = report[f"index_std_{n}"]
                a.plot(c.x, c.y, marker="o", ms=3, **STYLE[n])
        a.set_xlabel("month")
        a.set_ylabel("index std")
        a.set_title("seasonal cycle of index variability")
        a.legend(fontsize=7)
        written.append(_save(fig, os.path.join(out_dir, "index.png")))

    tags = [n[len("comp_"):-len("_population")] for n in report.names("map")
            if n.startswith("comp_") and n.endswith("_population")]
    if tags:
        fig, ax = _figure(len(tags), 2, width=4.6, height=2.8)
        for i, tag in enumerate(tags):
            for j, n in enumerate(("population", "boosted")):
                name = f"comp_{tag}_{n}"
                if name in report:
                    count = report[f"comp_count_{tag}_{n}"].value
                    _map(ax[i, j], fig, report[name], f"{tag} {n} (n={count:.0f})")
                else:
                    ax[i, j].set_axis_off()
        written.append(_save(fig, os.path.join(out_dir, "composites.png")))
    return written
