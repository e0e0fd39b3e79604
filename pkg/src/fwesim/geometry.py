"""Spatial diagnostics for statistic maps.

Spatial autocorrelation by shifted-volume correlation along the grid axes,
residual-based FWHM/RESEL estimation, gradient-magnitude roughness maps, and
the conversions between correlation width and kernel FWHM.

Two deliberately distinct difference schemes are used: forward differences
for the FWHM estimator (package practice) and central differences for the
roughness map (gradient-filter view).  All computations read masked voxels
only.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateResiduals, DimMismatch, EmptyOverlap
from .synth import FWHM_PER_SIGMA, KernelSpec
from .volio import Mask, Volume3, Volume4

_EPS = 1e-12


@dataclass(frozen=True)
class SacfCurve:
    """Estimated spatial autocorrelation: correlation per mm lag.

    Lag 0 (correlation 1) is implicit; ``distances_mm`` starts at the first
    positive lag and is strictly ascending.
    """

    distances_mm: np.ndarray
    correlation: np.ndarray
    n_maps: int

    def __post_init__(self):
        d = np.asarray(self.distances_mm, dtype=float)
        c = np.asarray(self.correlation, dtype=float)
        if d.shape != c.shape or d.ndim != 1:
            raise ValueError("distances and correlations must be 1-D and aligned")
        if np.any(np.diff(d) <= 0) or np.any(d <= 0):
            raise ValueError("lags must be positive and strictly ascending")
        object.__setattr__(self, "distances_mm", d)
        object.__setattr__(self, "correlation", c)

    def at(self, distance_mm: float) -> float:
        """Correlation at the nearest estimated lag."""
        i = int(np.argmin(np.abs(self.distances_mm - distance_mm)))
        return float(self.correlation[i])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["distance_mm", "correlation"])
            w.writerow(["0", "1"])
            for d, c in zip(self.distances_mm, self.correlation):
                w.writerow([f"{d:.6g}", f"{c:.6g}"])


@dataclass(frozen=True)
class SmoothnessEstimate:
    """Per-axis FWHM (mm) and the RESEL count of the search region."""

    fwhm_mm: tuple[float, float, float]
    resels: float
    source: str = "group_residuals"

    def __post_init__(self):
        if any(f <= 0 for f in self.fwhm_mm):
            raise ValueError("FWHM must be positive")
        if not self.resels > 0:
            raise ValueError("resel count must be positive")
        if self.source not in ("group_residuals", "first_level_average"):
            raise ValueError(f"unknown smoothness source {self.source!r}")

    @property
    def geometric_mean_fwhm(self) -> float:
        return float(np.prod(self.fwhm_mm) ** (1.0 / 3.0))


@dataclass(frozen=True)
class RoughnessMap:
    """Inverse average gradient magnitude (mm per unit gradient), masked."""

    inverse_roughness: Volume3


def _axis_correlation(data: np.ndarray, inside: np.ndarray, axis: int, lag: int):
    front = [slice(None)] * 3
    back = [slice(None)] * 3
    front[axis] = slice(0, data.shape[axis] - lag)
    back[axis] = slice(lag, data.shape[axis])
    valid = inside[tuple(front)] & inside[tuple(back)]
    if not valid.any():
        return None
    x = data[tuple(front)][valid]
    y = data[tuple(back)][valid]
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float(xc @ xc) * float(yc @ yc))
    if denom == 0.0:
        return 0.0
    return float(xc @ yc) / denom


def estimate_sacf(maps, mask: Mask, max_lag_mm: float) -> SacfCurve:
    """Average shifted-volume correlation along x, y and z.

    For each axis, integer voxel lags up to ``max_lag_mm`` are correlated over
    voxel pairs that are both inside the mask; axes are then averaged on a
    common mm grid, each axis contributing its nearest available voxel lag.
    Curves are averaged over maps.
    """
    maps = list(maps)
    if not maps:
        raise ValueError("need at least one map")
    voxel = maps[0].voxel_size_mm
    if max_lag_mm < min(voxel):
        raise ValueError("max_lag_mm below the smallest voxel size")
    axis_lags = []
    for axis in range(3):
        n_lags = int(math.floor(max_lag_mm / voxel[axis]))
        n_lags = min(n_lags, maps[0].dims[axis] - 1)
        axis_lags.append(np.arange(1, n_lags + 1) * voxel[axis])
    distances = np.unique(np.concatenate([d for d in axis_lags if len(d)]))
    if len(distances) == 0:
        raise EmptyOverlap("no voxel lag fits below max_lag_mm")

    per_map = np.zeros((len(maps), len(distances)))
    for mi, vol in enumerate(maps):
        if vol.dims != mask.dims:
            raise DimMismatch(f"map dims {vol.dims} != mask dims {mask.dims}")
        axis_corr = []
        for axis in range(3):
            corr = []
            for lag in range(1, len(axis_lags[axis]) + 1):
                c = _axis_correlation(vol.data, mask.inside, axis, lag)
                if c is None:
                    raise EmptyOverlap(
                        f"mask too thin for lag {lag} voxels along axis {axis}"
                    )
                corr.append(c)
            axis_corr.append(np.asarray(corr))
        for di, d in enumerate(distances):
            vals = []
            for axis in range(3):
                if not len(axis_lags[axis]):
                    continue
                nearest = int(np.argmin(np.abs(axis_lags[axis] - d)))
                vals.append(axis_corr[axis][nearest])
            per_map[mi, di] = float(np.mean(vals))
    return SacfCurve(distances, per_map.mean(axis=0), n_maps=len(maps))


def sacf_sigma_to_fwhm(sigma_mm: float) -> float:
    """FWHM of the kernel whose output field has a Gaussian SACF of width sigma.

    Convolving white noise with a Gaussian of width s yields correlation
    exp(-d^2 / (4 s^2)), i.e. a Gaussian SACF with sigma = s * sqrt(2).
    """
    if sigma_mm <= 0:
        raise ValueError("sigma must be positive")
    return sigma_mm / math.sqrt(2.0) * FWHM_PER_SIGMA


def fwhm_to_sacf_sigma(fwhm_mm: float) -> float:
    if fwhm_mm <= 0:
        raise ValueError("fwhm must be positive")
    return fwhm_mm / FWHM_PER_SIGMA * math.sqrt(2.0)


def estimate_fwhm_residuals(residuals: Volume4, mask: Mask,
                            voxel_size_mm=None,
                            source: str = "group_residuals") -> SmoothnessEstimate:
    """FWHM per axis from the variance of forward differences of residuals.

    Each residual frame is normalized to unit voxel variance over the mask;
    the variance v of in-mask forward differences then gives
    fwhm = voxel_size * sqrt(4 ln 2 / v) per axis.  The RESEL count is the
    masked volume divided by the product of the per-axis FWHM.
    """
    if residuals.nt < 3:
        raise ValueError("need at least 3 residual frames")
    voxel = tuple(voxel_size_mm) if voxel_size_mm is not None else residuals.voxel_size_mm
    frames = residuals.data[mask.inside]  # (n_inside, nt), masked only
    sd = frames.std(axis=0)
    if np.any(sd == 0):
        raise DegenerateResiduals("residual frame with zero variance over the mask")
    inside = mask.inside
    fwhm = []
    for axis in range(3):
        front = [slice(None)] * 3
        back = [slice(None)] * 3
        front[axis] = slice(0, inside.shape[axis] - 1)
        back[axis] = slice(1, inside.shape[axis])
        valid = inside[tuple(front)] & inside[tuple(back)]
        if not valid.any():
            raise DegenerateResiduals(f"mask too thin for differences along axis {axis}")
        sq_sum = 0.0
        d_sum = 0.0
        n_tot = 0
        for fi in range(residuals.nt):
            vol = residuals.data[..., fi]
            d = (vol[tuple(back)][valid] - vol[tuple(front)][valid]) / sd[fi]
            sq_sum += float(d @ d)
            d_sum += float(d.sum())
            n_tot += d.size
        v = sq_sum / n_tot - (d_sum / n_tot) ** 2
        if v <= 0:
            raise DegenerateResiduals(f"zero difference variance along axis {axis}")
        fwhm.append(voxel[axis] * math.sqrt(4.0 * math.log(2.0) / v))
    volume_mm3 = mask.n_inside * float(np.prod(voxel))
    resels = volume_mm3 / float(np.prod(fwhm))
    return SmoothnessEstimate(tuple(fwhm), resels, source=source)


def kernel_from_smoothness(est: SmoothnessEstimate) -> KernelSpec:
    """Gaussian kernel matching the geometric-mean FWHM of an estimate."""
    return KernelSpec.gaussian(est.geometric_mean_fwhm)


def _masked_gradient(data: np.ndarray, inside: np.ndarray, axis: int,
                     voxel_mm: float) -> np.ndarray:
    """Per-axis gradient in 1/mm using only in-mask neighbors.

    Central differences where both neighbors are inside, one-sided where only
    one is, zero where the voxel has no in-mask axis neighbor.
    """
    n = data.shape[axis]
    grad = np.zeros_like(data)
    if n < 2:
        return grad

    def sl(a, b):
        s = [slice(None)] * 3
        s[axis] = slice(a, b)
        return tuple(s)

    up = np.zeros_like(data)
    up_ok = np.zeros_like(inside)
    up[sl(0, n - 1)] = data[sl(1, n)]
    up_ok[sl(0, n - 1)] = inside[sl(1, n)]
    dn = np.zeros_like(data)
    dn_ok = np.zeros_like(inside)
    dn[sl(1, n)] = data[sl(0, n - 1)]
    dn_ok[sl(1, n)] = inside[sl(0, n - 1)]

    both = up_ok & dn_ok & inside
    only_up = up_ok & ~dn_ok & inside
    only_dn = dn_ok & ~up_ok & inside
    grad[both] = (up[both] - dn[both]) / (2.0 * voxel_mm)
    grad[only_up] = (up[only_up] - data[only_up]) / voxel_mm
    grad[only_dn] = (data[only_dn] - dn[only_dn]) / voxel_mm
    return grad


def roughness_map(maps, mask: Mask) -> RoughnessMap:
    """Inverse of the average gradient magnitude over a set of maps."""
    maps = list(maps)
    if not maps:
        raise ValueError("need at least one map")
    acc = np.zeros(maps[0].dims)
    for vol in maps:
        if vol.dims != mask.dims:
            raise DimMismatch(f"map dims {vol.dims} != mask dims {mask.dims}")
        g2 = np.zeros(vol.dims)
        for axis in range(3):
            g = _masked_gradient(vol.data, mask.inside, axis, vol.voxel_size_mm[axis])
            g2 += g * g
        acc += np.sqrt(g2)
    acc /= len(maps)
    inv = np.where(mask.inside, 1.0 / (acc + _EPS), 0.0)
    return RoughnessMap(Volume3(maps[0].dims, maps[0].voxel_size_mm, inv))


def cluster_incidence_map(cluster_masks, voxel_size_mm=(1.0, 1.0, 1.0),
                          dims=None) -> Volume3:
    """Voxel-wise count of how many cluster maps cover each voxel."""
    masks = list(cluster_masks)
    if dims is None:
        if not masks:
            raise ValueError("need dims when no cluster masks are given")
        dims = masks[0].dims
    acc = np.zeros(dims)
    for m in masks:
        if m.dims != tuple(dims):
            raise DimMismatch(f"cluster mask dims {m.dims} != {tuple(dims)}")
        acc += m.inside
    return Volume3(tuple(dims), tuple(voxel_size_mm), acc)
