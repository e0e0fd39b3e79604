"""Group-level estimation over subject beta maps.

One-sample and two-sample ordinary-least-squares t-tests, plus a one-step
mixed-effects estimator with a nonnegativity-constrained between-subject
variance (weights subjects by within-subject variance; the positivity
constraint is what shrinks null statistics below unit variance).

All estimators work on masked voxels only and return full-grid volumes with
zeros outside the mask.  Zero-variance voxels yield a statistic of 0 and are
recorded in a degenerate-voxel list rather than raising, so a single constant
voxel cannot abort a long campaign.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GroupTooLarge, MissingVariances, TooFewSubjects
from .rng import STREAM_SPLIT, substream
from .volio import Mask, Volume3, Volume4


@dataclass(frozen=True)
class SubjectStack:
    """Per-subject beta maps, optionally with within-subject variance maps."""

    betas: Volume4
    variances: Volume4 | None = None

    def __post_init__(self):
        if self.betas.nt < 2:
            raise ValueError("need at least two subjects")
        if self.variances is not None:
            if self.variances.nt != self.betas.nt or self.variances.dims != self.betas.dims:
                raise ValueError("variance maps must align with beta maps")
            if np.any(self.variances.data < 0):
                raise ValueError("variances must be nonnegative")

    @property
    def n_subjects(self) -> int:
        return self.betas.nt


@dataclass(frozen=True)
class GlmResult:
    """Statistic map with the pieces downstream inference needs."""

    stat: Volume3
    df: int
    residuals: Volume4
    beta: Volume3
    kind: str
    degenerate: np.ndarray  # x-fastest linear indices of zero-variance voxels


def _masked(vol4: Volume4, mask: Mask) -> np.ndarray:
    """(n_inside, nt) view of masked voxels; never touches outside voxels."""
    return vol4.data[mask.inside]


def _linear_indices(mask: Mask) -> np.ndarray:
    """x-fastest linear index of each masked voxel, in extraction order."""
    nx, ny, _ = mask.dims
    xs, ys, zs = np.nonzero(mask.inside)
    return xs + nx * (ys + ny * zs)


def _embed(values: np.ndarray, mask: Mask, voxel_size_mm) -> Volume3:
    out = np.zeros(mask.dims)
    out[mask.inside] = values
    return Volume3(mask.dims, voxel_size_mm, out)


def _embed4(frames: np.ndarray, mask: Mask, voxel_size_mm) -> Volume4:
    nt = frames.shape[1]
    out = np.zeros(mask.dims + (nt,))
    out[mask.inside] = frames
    return Volume4(mask.dims, voxel_size_mm, nt, out)


def one_sample_t_flat(b: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """t, mean and per-voxel degenerate flags for a (n_vox, n) beta matrix."""
    n = b.shape[1]
    mean = b.mean(axis=1)
    ss = ((b - mean[:, None]) ** 2).sum(axis=1)
    degenerate = ss == 0.0
    sd = np.sqrt(ss / (n - 1))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(degenerate, 0.0, mean / (sd / np.sqrt(n)))
    return t, mean, degenerate


def two_sample_t_flat(b1: np.ndarray, b2: np.ndarray):
    """Pooled-variance t (group1 - group2) for (n_vox, n_i) beta matrices."""
    n1, n2 = b1.shape[1], b2.shape[1]
    m1, m2 = b1.mean(axis=1), b2.mean(axis=1)
    ss = ((b1 - m1[:, None]) ** 2).sum(axis=1) + ((b2 - m2[:, None]) ** 2).sum(axis=1)
    degenerate = ss == 0.0
    pooled = ss / (n1 + n2 - 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(
            degenerate, 0.0,
            (m1 - m2) / np.sqrt(pooled * (1.0 / n1 + 1.0 / n2)),
        )
    return t, m1 - m2, degenerate


def one_sample_t(s: SubjectStack, mask: Mask) -> GlmResult:
    """Per voxel t = mean / (sd / sqrt(n)) with df = n - 1."""
    n = s.n_subjects
    b = _masked(s.betas, mask)
    t, mean, degenerate = one_sample_t_flat(b)
    vox = s.betas.voxel_size_mm
    return GlmResult(
        stat=_embed(t, mask, vox),
        df=n - 1,
        residuals=_embed4(b - mean[:, None], mask, vox),
        beta=_embed(mean, mask, vox),
        kind="one_sample",
        degenerate=_linear_indices(mask)[degenerate],
    )


def two_sample_t(s1: SubjectStack, s2: SubjectStack, mask: Mask) -> GlmResult:
    """Pooled-variance two-sample t, sign convention group1 - group2."""
    if s1.betas.dims != s2.betas.dims:
        raise ValueError("groups must share a grid")
    b1, b2 = _masked(s1.betas, mask), _masked(s2.betas, mask)
    t, diff, degenerate = two_sample_t_flat(b1, b2)
    m1, m2 = b1.mean(axis=1), b2.mean(axis=1)
    resid = np.concatenate([b1 - m1[:, None], b2 - m2[:, None]], axis=1)
    vox = s1.betas.voxel_size_mm
    return GlmResult(
        stat=_embed(t, mask, vox),
        df=s1.n_subjects + s2.n_subjects - 2,
        residuals=_embed4(resid, mask, vox),
        beta=_embed(diff, mask, vox),
        kind="two_sample",
        degenerate=_linear_indices(mask)[degenerate],
    )


def mema_t(s: SubjectStack, mask: Mask) -> GlmResult:
    """Mixed-effects z-like statistic with nonnegative between-subject variance.

    Method of moments: sigma2_btw = max(0, var(betas) - mean(variances)).
    Weights 1/(sigma2_btw + v_i); the statistic effect * sqrt(sum of weights)
    is referred to the standard normal.  Because sigma2_btw can never be
    negative, null statistics are shrunk whenever it is overestimated.
    """
    if s.variances is None:
        raise MissingVariances("mema requires per-subject variance maps")
    n = s.n_subjects
    if n < 3:
        raise TooFewSubjects("mema needs at least 3 subjects")
    b = _masked(s.betas, mask)
    v = _masked(s.variances, mask)
    var_b = b.var(axis=1, ddof=1)
    sigma2_btw = np.maximum(0.0, var_b - v.mean(axis=1))
    denom = sigma2_btw[:, None] + v
    degenerate = denom.max(axis=1) == 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(denom > 0, 1.0 / np.where(denom > 0, denom, 1.0), 0.0)
        wsum = w.sum(axis=1)
        effect = np.where(wsum > 0, (w * b).sum(axis=1) / np.where(wsum > 0, wsum, 1.0), 0.0)
        stat = np.where(degenerate, 0.0, effect * np.sqrt(wsum))
    vox = s.betas.voxel_size_mm
    return GlmResult(
        stat=_embed(stat, mask, vox),
        df=n - 1,
        residuals=_embed4(b - effect[:, None], mask, vox),
        beta=_embed(effect, mask, vox),
        kind="mema",
        degenerate=_linear_indices(mask)[degenerate],
    )


def random_split(n_total: int, group_size: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Two disjoint random groups from a permuted subject pool."""
    if 2 * group_size > n_total:
        raise GroupTooLarge(f"2 x {group_size} subjects exceed pool of {n_total}")
    perm = substream(seed, STREAM_SPLIT).permutation(n_total)
    return perm[:group_size].copy(), perm[group_size:2 * group_size].copy()
