"""Parametric familywise-error inference for smooth statistic fields.

Voxel-wise FWE via the expected Euler characteristic of the excursion set
(0- to 3-dimensional resel terms), cluster-extent FWE p-values under the
squared-exponential correlation assumption, and a plain Bonferroni
correction.

The search region enters only through its volume; lower-dimensional resel
counts use the ball of equal volume.  Student-t fields get their own EC
densities; cluster-size results for Gaussian fields are applied to t fields
through a probability-matched (Gaussianized) threshold by default.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln
from scipy.stats import norm, t as t_dist

from .cluster import CdtSpec, cdt_to_threshold
from .errors import CdtTooLow
from .geometry import SmoothnessEstimate

_GAMMA_5_2 = math.gamma(2.5)
_LN2_4 = 4.0 * math.log(2.0)
MIN_CDT_Z = 1.6


@dataclass(frozen=True)
class RftContext:
    """Everything the closed forms need about one analysis."""

    smoothness: SmoothnessEstimate
    search_volume_mm3: float
    df: int
    field_kind: str = "gaussian"

    def __post_init__(self):
        if self.search_volume_mm3 <= 0:
            raise ValueError("search volume must be positive")
        if self.field_kind not in ("gaussian", "student_t"):
            raise ValueError(f"unknown field kind {self.field_kind!r}")
        if self.field_kind == "student_t" and self.df < 1:
            raise ValueError("student_t field needs df >= 1")


def resel_counts(ctx: RftContext) -> tuple[float, float, float, float]:
    """(R0, R1, R2, R3) for the equal-volume ball.

    R3 is the exact volume resel count; R1 and R2 come from the ball radius
    with the geometric-mean FWHM.
    """
    fx, fy, fz = ctx.smoothness.fwhm_mm
    r3 = ctx.search_volume_mm3 / (fx * fy * fz)
    radius = (3.0 * ctx.search_volume_mm3 / (4.0 * math.pi)) ** (1.0 / 3.0)
    f_mean = ctx.smoothness.geometric_mean_fwhm
    r1 = 4.0 * radius / f_mean
    r2 = 2.0 * math.pi * radius ** 2 / f_mean ** 2
    return 1.0, r1, r2, r3


def ec_density_gaussian(z: float, d: int) -> float:
    """d-dimensional EC density of a unit Gaussian field (FWHM units)."""
    if d == 0:
        return float(norm.sf(z))
    e = math.exp(-0.5 * z * z)
    if d == 1:
        return math.sqrt(_LN2_4) / (2.0 * math.pi) * e
    if d == 2:
        return _LN2_4 / (2.0 * math.pi) ** 1.5 * z * e
    if d == 3:
        return _LN2_4 ** 1.5 / (2.0 * math.pi) ** 2 * (z * z - 1.0) * e
    raise ValueError(f"EC density dimension must be 0..3, got {d}")


def ec_density_t(tv: float, df: int, d: int) -> float:
    """d-dimensional EC density of a unit t field with df degrees of freedom."""
    if d == 0:
        return float(t_dist.sf(tv, df))
    v = float(df)
    core = (1.0 + tv * tv / v) ** (-(v - 1.0) / 2.0)
    if d == 1:
        return math.sqrt(_LN2_4) / (2.0 * math.pi) * core
    if d == 2:
        gamma_ratio = math.exp(gammaln((v + 1.0) / 2.0) - gammaln(v / 2.0)) / math.sqrt(v / 2.0)
        return _LN2_4 / (2.0 * math.pi) ** 1.5 * gamma_ratio * tv * core
    if d == 3:
        return _LN2_4 ** 1.5 / (2.0 * math.pi) ** 2 * ((v - 1.0) / v * tv * tv - 1.0) * core
    raise ValueError(f"EC density dimension must be 0..3, got {d}")


def expected_ec(stat_value: float, ctx: RftContext) -> float:
    """Expected Euler characteristic of the excursion set above stat_value."""
    rs = resel_counts(ctx)
    if ctx.field_kind == "student_t":
        dens = [ec_density_t(stat_value, ctx.df, d) for d in range(4)]
    else:
        dens = [ec_density_gaussian(stat_value, d) for d in range(4)]
    return float(sum(r * rho for r, rho in zip(rs, dens)))


def voxel_fwe_p(stat_value: float, ctx: RftContext) -> float:
    """FWE-corrected voxel p-value: expected EC capped at 1."""
    return min(1.0, max(0.0, expected_ec(stat_value, ctx)))


def bonferroni_p(stat_value: float, n_voxels: int, df: int | None = None) -> float:
    """n_voxels times the upper-tail p (Student t with df, else normal)."""
    if n_voxels < 1:
        raise ValueError("need at least one voxel")
    tail = float(t_dist.sf(stat_value, df)) if df is not None else float(norm.sf(stat_value))
    return min(1.0, n_voxels * tail)


def _cluster_params(cdt: CdtSpec, ctx: RftContext, voxel_volume_mm3: float,
                    gaussianize: bool) -> tuple[float, float]:
    """(expected cluster count, expected cluster size in voxels) at the CDT."""
    if gaussianize or ctx.field_kind == "gaussian":
        u = cdt.gaussian_z
        if u < MIN_CDT_Z:
            raise CdtTooLow(f"CDT z {u:.3f} below {MIN_CDT_Z}; closed form not trusted")
        em = expected_ec(u, RftContext(ctx.smoothness, ctx.search_volume_mm3,
                                       ctx.df, "gaussian"))
        tail = float(norm.sf(u))
    else:
        cdt = cdt if cdt.df_context is not None else cdt.with_df(ctx.df)
        u = cdt_to_threshold(cdt)
        if cdt.gaussian_z < MIN_CDT_Z:
            raise CdtTooLow(f"CDT z {cdt.gaussian_z:.3f} below {MIN_CDT_Z}")
        em = expected_ec(u, ctx)
        tail = float(t_dist.sf(u, ctx.df))
    n_voxels = ctx.search_volume_mm3 / voxel_volume_mm3
    en = n_voxels * tail
    if em <= 0 or en <= 0:
        raise CdtTooLow("expected cluster count vanished; CDT out of range")
    return em, en / em


def cluster_size_tail(size_voxels: float, cdt: CdtSpec, ctx: RftContext,
                      voxel_volume_mm3: float, gaussianize: bool = True) -> float:
    """P(cluster size >= s) for one null cluster, s in voxels."""
    em, mean_size = _cluster_params(cdt, ctx, voxel_volume_mm3, gaussianize)
    beta = (_GAMMA_5_2 / mean_size) ** (2.0 / 3.0)
    return math.exp(-beta * size_voxels ** (2.0 / 3.0))


def cluster_fwe_p(extent_voxels: float, cdt: CdtSpec, ctx: RftContext,
                  voxel_volume_mm3: float, gaussianize: bool = True) -> float:
    """FWE p-value for a cluster of the given extent.

    1 - exp(-E[clusters] * P(size >= extent)) with the s^(2/3) exponential
    size distribution of Gaussian-field clusters.
    """
    if extent_voxels < 1:
        return 1.0
    em, mean_size = _cluster_params(cdt, ctx, voxel_volume_mm3, gaussianize)
    beta = (_GAMMA_5_2 / mean_size) ** (2.0 / 3.0)
    p_size = math.exp(-beta * float(extent_voxels) ** (2.0 / 3.0))
    return -math.expm1(-em * p_size)


def rft_cluster_threshold(target_fwe_p: float, cdt: CdtSpec, ctx: RftContext,
                          voxel_volume_mm3: float, gaussianize: bool = True) -> int:
    """Smallest integer extent whose cluster FWE p is at or below target."""
    if not 0.0 < target_fwe_p < 1.0:
        raise ValueError("target must be in (0, 1)")
    em, mean_size = _cluster_params(cdt, ctx, voxel_volume_mm3, gaussianize)
    beta = (_GAMMA_5_2 / mean_size) ** (2.0 / 3.0)
    lam = -math.log1p(-target_fwe_p)
    if em <= lam:
        return 1
    s = (math.log(em / lam) / beta) ** 1.5
    k = max(1, int(math.ceil(s)))
    while k > 1 and cluster_fwe_p(k - 1, cdt, ctx, voxel_volume_mm3, gaussianize) <= target_fwe_p:
        k -= 1
    while cluster_fwe_p(k, cdt, ctx, voxel_volume_mm3, gaussianize) > target_fwe_p:
        k += 1
    return k
