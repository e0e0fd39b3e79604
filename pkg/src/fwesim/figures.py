"""Render report CSVs and null distributions as figures.

Every renderer takes tabular output produced elsewhere in the package and
writes a PNG next to it; nothing here computes statistics.  The matplotlib
Agg backend is forced so rendering works headless.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_FIG_W = 7.2
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0

plt.rcParams.update({
    "figure.figsize": (_FIG_W, _FIG_W * _GOLDEN),
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
})


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def fwe_report_figure(csv_path, out_png=None, nominal: float = 0.05) -> Path:
    """Bar chart of empirical FWE per backend/CDT/smoothing with CI whiskers."""
    rows = _read_csv(csv_path)
    if not rows:
        raise ValueError(f"{csv_path} has no rows")
    labels, rates, err_lo, err_hi = [], [], [], []
    for r in rows:
        tag = r["backend"]
        if r["cdt_p"]:
            tag += f"\ncdt p={float(r['cdt_p']):g}"
        if float(r["smoothing_fwhm_mm"]) > 0:
            tag += f"\nsm {float(r['smoothing_fwhm_mm']):g}mm"
        rate = float(r["fwe_rate"])
        labels.append(tag)
        rates.append(rate)
        err_lo.append(rate - float(r["ci_low"]))
        err_hi.append(float(r["ci_high"]) - rate)
    fig, ax = plt.subplots()
    x = np.arange(len(labels))
    ax.bar(x, rates, color="#4878d0", yerr=[err_lo, err_hi], capsize=3)
    ax.axhline(nominal, color="#d65f5f", linestyle="--", linewidth=1,
               label=f"nominal {nominal:g}")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylabel("empirical familywise error rate")
    ax.set_title(f"{rows[0]['test']} / kernel {rows[0]['kernel']}")
    ax.legend()
    out = Path(out_png) if out_png else Path(csv_path).with_suffix(".png")
    fig.savefig(out)
    plt.close(fig)
    return out


def sacf_figure(csv_path, out_png=None, reference_fwhm_mm: float | None = None) -> Path:
    """Estimated spatial autocorrelation with an optional squared-exponential
    reference curve for a given kernel FWHM."""
    rows = _read_csv(csv_path)
    d = np.array([float(r["distance_mm"]) for r in rows])
    c = np.array([float(r["correlation"]) for r in rows])
    fig, ax = plt.subplots()
    ax.plot(d, c, "o-", color="#4878d0", label="estimated")
    if reference_fwhm_mm:
        sigma_k = reference_fwhm_mm / (2.0 * math.sqrt(2.0 * math.log(2.0)))
        dd = np.linspace(0, d.max(), 200)
        ax.plot(dd, np.exp(-dd ** 2 / (4.0 * sigma_k ** 2)), "--", color="#d65f5f",
                label=f"squared exponential, {reference_fwhm_mm:g} mm FWHM")
    ax.set_xlabel("distance (mm)")
    ax.set_ylabel("correlation")
    ax.set_ylim(-0.1, 1.02)
    ax.legend()
    out = Path(out_png) if out_png else Path(csv_path).with_suffix(".png")
    fig.savefig(out)
    plt.close(fig)
    return out


def ratio_figure(csv_path, out_png=None) -> Path:
    """Nonparametric/parametric cluster p ratio against cluster size, log y."""
    rows = _read_csv(csv_path)
    if not rows:
        raise ValueError(f"{csv_path} has no rows")
    sizes = np.array([float(r["cluster_size_voxels"]) for r in rows])
    ratios = np.array([float(r["ratio"]) for r in rows])
    fig, ax = plt.subplots()
    ax.scatter(sizes, ratios, s=12, alpha=0.6, color="#4878d0")
    ax.axhline(1.0, color="#d65f5f", linestyle="--", linewidth=1)
    ax.set_yscale("log")
    ax.set_xlabel("cluster size (voxels)")
    ax.set_ylabel("nonparametric / parametric FWE p")
    out = Path(out_png) if out_png else Path(csv_path).with_suffix(".png")
    fig.savefig(out)
    plt.close(fig)
    return out


def mc_null_figure(nulls, out_png) -> Path:
    """Histogram of max-extent nulls, one series per standardization mode."""
    fig, ax = plt.subplots()
    colors = {"buggy": "#d65f5f", "fixed": "#4878d0"}
    hi = max(int(n.extents.max()) for n in nulls) + 1
    bins = np.linspace(0, hi, min(80, hi + 1))
    for n in nulls:
        ax.hist(n.extents, bins=bins, alpha=0.55, label=f"{n.mode} rescale",
                color=colors.get(n.mode, None))
    ax.set_xlabel("max cluster extent (voxels)")
    ax.set_ylabel("iterations")
    ax.legend()
    out = Path(out_png)
    fig.savefig(out)
    plt.close(fig)
    return out


def slice_montage(volume, out_png, n_slices: int = 6, cmap: str = "magma") -> Path:
    """Axial slices of a volume (incidence or smoothness maps)."""
    nz = volume.dims[2]
    picks = np.linspace(0, nz - 1, n_slices).astype(int)
    cols = min(3, n_slices)
    rows = math.ceil(n_slices / cols)
    fig, axes = plt.subplots(rows, cols, figsize=(_FIG_W, _FIG_W * rows / cols))
    vmax = float(np.percentile(volume.data, 99.5)) or 1.0
    for ax, z in zip(np.ravel(axes), picks):
        ax.imshow(volume.data[:, :, z].T, origin="lower", cmap=cmap,
                  vmin=0.0, vmax=vmax)
        ax.set_title(f"z={z}", fontsize=7)
        ax.axis("off")
    for ax in np.ravel(axes)[len(picks):]:
        ax.axis("off")
    out = Path(out_png)
    fig.savefig(out)
    plt.close(fig)
    return out
