"""Thresholding and connected-component cluster extraction.

The shared geometric substrate for every cluster-level inference backend.
Connectivity is configurable (faces6 / edges18 / corners26) and surfaced in
every report.  Cluster ids are deterministic: descending size, ties broken by
ascending x-fastest linear index of the peak voxel.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage
from scipy.stats import norm, t as t_dist

from .volio import Mask, Volume3

CONNECTIVITIES = ("faces6", "edges18", "corners26")


def structure_for(connectivity: str) -> np.ndarray:
    try:
        rank = 1 + CONNECTIVITIES.index(connectivity)
    except ValueError:
        raise ValueError(f"connectivity must be one of {CONNECTIVITIES}, got {connectivity!r}")
    return ndimage.generate_binary_structure(3, rank)


@dataclass(frozen=True)
class CdtSpec:
    """Cluster defining threshold, given as an uncorrected p or a z value."""

    p_uncorrected: float | None = None
    z_equivalent: float | None = None
    df_context: int | None = None

    def __post_init__(self):
        if (self.p_uncorrected is None) == (self.z_equivalent is None):
            raise ValueError("give exactly one of p_uncorrected or z_equivalent")
        if self.p_uncorrected is not None and not 0.0 < self.p_uncorrected < 1.0:
            raise ValueError(f"p must be in (0, 1), got {self.p_uncorrected}")
        if self.z_equivalent is not None and not self.z_equivalent > 0:
            raise ValueError(f"z must be positive, got {self.z_equivalent}")

    def with_df(self, df: int) -> "CdtSpec":
        return replace(self, df_context=int(df))

    @property
    def gaussian_z(self) -> float:
        """Probability-matched normal threshold for this CDT."""
        if self.z_equivalent is not None:
            return float(self.z_equivalent)
        return float(norm.isf(self.p_uncorrected))

    @property
    def tail_p(self) -> float:
        if self.p_uncorrected is not None:
            return float(self.p_uncorrected)
        return float(norm.sf(self.z_equivalent))

    def label(self) -> str:
        if self.p_uncorrected is not None:
            return f"p={self.p_uncorrected:g}"
        return f"z={self.z_equivalent:g}"


def cdt_to_threshold(c: CdtSpec) -> float:
    """Statistic-space threshold: z as given, or the upper-tail quantile of
    Student t (with df context) / the normal (without) for a p-source CDT."""
    if c.z_equivalent is not None:
        return float(c.z_equivalent)
    if c.df_context is not None:
        if c.df_context < 1:
            raise ValueError("df_context must be >= 1")
        return float(t_dist.isf(c.p_uncorrected, c.df_context))
    return float(norm.isf(c.p_uncorrected))


@dataclass(frozen=True)
class Cluster:
    id: int
    size_voxels: int
    size_mm3: float
    peak_value: float
    peak_index: int
    fwe_p: float | None = None
    sign: int = 1


@dataclass(frozen=True)
class ClusterTable:
    clusters: list[Cluster] = field(default_factory=list)
    connectivity: str = "faces6"
    threshold_used: float = 0.0

    def __len__(self):
        return len(self.clusters)

    def with_pvalues(self, pvalues) -> "ClusterTable":
        new = [replace(c, fwe_p=float(p)) for c, p in zip(self.clusters, pvalues)]
        return replace(self, clusters=new)

    def min_p(self) -> float:
        ps = [c.fwe_p for c in self.clusters if c.fwe_p is not None]
        return min(ps) if ps else 1.0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "size_voxels", "size_mm3", "peak_value", "fwe_p", "sign"])
            for c in self.clusters:
                w.writerow([
                    c.id, c.size_voxels, f"{c.size_mm3:.6g}", f"{c.peak_value:.6g}",
                    "" if c.fwe_p is None else f"{c.fwe_p:.6g}", c.sign,
                ])


def _f_linear_index(xs, ys, zs, dims) -> np.ndarray:
    nx, ny, _ = dims
    return xs + nx * (ys + ny * zs)


def label_clusters(stat: Volume3, threshold: float, mask: Mask,
                   connectivity: str = "faces6", sign: int = 1) -> ClusterTable:
    """Supra-threshold maximal connected components inside the mask.

    ``sign=-1`` labels the negative tail (``-stat > threshold``) and tags the
    resulting clusters accordingly.
    """
    if not np.isfinite(threshold):
        raise ValueError("threshold must be finite")
    data = stat.data if sign >= 0 else -stat.data
    with np.errstate(invalid="ignore"):
        binary = (data > threshold) & mask.inside
    labels, n = ndimage.label(binary, structure=structure_for(connectivity))
    clusters = []
    if n:
        counts = np.bincount(labels.ravel())
        xs, ys, zs = np.nonzero(labels)
        lab = labels[xs, ys, zs]
        vals = data[xs, ys, zs]
        lin = _f_linear_index(xs, ys, zs, stat.dims)
        order = np.lexsort((lin, lab))
        lab, vals, lin = lab[order], vals[order], lin[order]
        starts = np.searchsorted(lab, np.arange(1, n + 1))
        ends = np.append(starts[1:], len(lab))
        vox_vol = stat.voxel_volume_mm3
        rows = []
        for k in range(n):
            seg = slice(starts[k], ends[k])
            v = vals[seg]
            peak_pos = int(np.argmax(v))  # first max in ascending linear order
            rows.append((
                int(counts[k + 1]),
                float(v[peak_pos]) * (1 if sign >= 0 else -1),
                int(lin[seg][peak_pos]),
            ))
        rows.sort(key=lambda r: (-r[0], r[2]))
        clusters = [
            Cluster(
                id=i + 1,
                size_voxels=size,
                size_mm3=size * vox_vol,
                peak_value=peak,
                peak_index=peak_idx,
                sign=1 if sign >= 0 else -1,
            )
            for i, (size, peak, peak_idx) in enumerate(rows)
        ]
    return ClusterTable(clusters=clusters, connectivity=connectivity,
                        threshold_used=float(threshold))


def max_extent(table: ClusterTable) -> int:
    """Largest cluster size in voxels; 0 for an empty table."""
    return max((c.size_voxels for c in table.clusters), default=0)


# --- fast paths for resampling nulls (no tables, only max extents) -------


def max_extent_binary(binary: np.ndarray, structure: np.ndarray) -> int:
    labels, n = ndimage.label(binary, structure=structure)
    if not n:
        return 0
    return int(np.bincount(labels.ravel())[1:].max())


def batch_max_extents(binary4d: np.ndarray, structure3d: np.ndarray) -> np.ndarray:
    """Per-slice max cluster extent for a (R, nx, ny, nz) stack of binary fields.

    One labeling pass over the whole stack with connectivity disabled along
    the stacking axis, then per-slice counts.
    """
    r = binary4d.shape[0]
    structure4d = np.zeros((3, 3, 3, 3), dtype=bool)
    structure4d[1] = structure3d
    labels, n = ndimage.label(binary4d, structure=structure4d)
    out = np.zeros(r, dtype=np.int64)
    if not n:
        return out
    flat = labels.reshape(r, -1)
    for s in range(r):
        row = flat[s]
        if row.max():
            out[s] = np.bincount(row[row > 0]).max()
    return out
