"""Synthetic null data generation.

Produces smoothed Gaussian random volumes with controllable spatial
autocorrelation (single Gaussian or heavy-tailed two-component mixture,
stationary or non-stationary), and per-subject first-level time series with
AR(1) noise reduced to beta maps.

Smoothing uses zero padding, so grid borders are attenuated; the two rescale
modes differ in how they standardize back to unit variance:

* ``analytic`` divides by the square root of the sum of squares of the
  composite discrete kernel, making interior voxels exactly unit variance
  while borders stay attenuated.
* ``empirical`` divides by the sample standard deviation over the whole grid,
  which is pulled down by the attenuated borders and therefore leaves
  interior voxels with variance above one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DurationZero, KernelTooWide, RankDeficientDesign
from .rng import STREAM_FIELD, STREAM_PARADIGM, substream
from .volio import Mask, Volume3

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))


@dataclass(frozen=True)
class KernelSpec:
    """Isotropic smoothing kernel: one Gaussian or a weighted mixture."""

    kind: str
    fwhm_mm: tuple[float, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        if self.kind not in ("gaussian", "gaussian_mixture"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        f = tuple(float(x) for x in self.fwhm_mm)
        w = tuple(float(x) for x in self.weights)
        if len(f) != len(w) or not f:
            raise ValueError("fwhm_mm and weights must be equal-length and nonempty")
        if any(x <= 0 for x in f):
            raise ValueError("all FWHM must be positive")
        if any(x < 0 for x in w):
            raise ValueError("weights must be nonnegative")
        if abs(sum(w) - 1.0) > 1e-12:
            raise ValueError(f"weights must sum to 1, got {sum(w)}")
        if self.kind == "gaussian" and len(f) != 1:
            raise ValueError("gaussian kernel has exactly one component")
        if self.kind == "gaussian_mixture" and len(f) < 2:
            raise ValueError("mixture kernel needs at least two components")
        object.__setattr__(self, "fwhm_mm", f)
        object.__setattr__(self, "weights", w)

    @staticmethod
    def gaussian(fwhm_mm: float) -> "KernelSpec":
        return KernelSpec("gaussian", (float(fwhm_mm),), (1.0,))

    @staticmethod
    def mixture(fwhms_mm, weights) -> "KernelSpec":
        return KernelSpec("gaussian_mixture", tuple(fwhms_mm), tuple(weights))

    def scaled(self, factor: float) -> "KernelSpec":
        return KernelSpec(self.kind, tuple(f * factor for f in self.fwhm_mm), self.weights)

    def widened(self, extra_fwhm_mm: float) -> "KernelSpec":
        """Kernel equivalent to this one followed by an extra Gaussian pass."""
        if extra_fwhm_mm <= 0:
            return self
        return KernelSpec(
            self.kind,
            tuple(math.hypot(f, extra_fwhm_mm) for f in self.fwhm_mm),
            self.weights,
        )

    def label(self) -> str:
        if self.kind == "gaussian":
            return f"gaussian:{self.fwhm_mm[0]:g}"
        fl = ",".join(f"{f:g}" for f in self.fwhm_mm)
        wl = ",".join(f"{w:g}" for w in self.weights)
        return f"mix:{fl}:{wl}"


@dataclass(frozen=True)
class Ar1Spec:
    """Lag-1 autoregressive noise: rho in [0, 1), innovation sd sigma."""

    rho: float
    sigma: float

    def __post_init__(self):
        if not 0.0 <= self.rho < 1.0:
            raise ValueError(f"rho must be in [0, 1), got {self.rho}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be nonnegative, got {self.sigma}")


@dataclass(frozen=True)
class NonstationarityField:
    """Per-voxel positive multiplier applied to the kernel width."""

    gain: Volume3

    def __post_init__(self):
        g = self.gain.data
        if not np.all(np.isfinite(g)) or np.any(g <= 0):
            raise ValueError("gain must be finite and strictly positive everywhere")


_PARADIGM_TABLE = {
    "B1": (10.0, 10.0),
    "B2": (30.0, 30.0),
    "E1": (2.0, 6.0),
    "E2": ((1.0, 4.0), (3.0, 6.0)),
}


@dataclass(frozen=True)
class ParadigmSpec:
    """Activity/rest timing of a pretended task design."""

    kind: str
    activity_s: float | tuple[float, float]
    rest_s: float | tuple[float, float]
    tr_s: float
    n_frames: int

    def __post_init__(self):
        if self.kind not in _PARADIGM_TABLE:
            raise ValueError(f"unknown paradigm kind {self.kind!r}")
        if self.tr_s <= 0:
            raise ValueError("tr_s must be positive")
        if self.n_frames < 8:
            raise ValueError("need at least 8 frames")
        for name, d in (("activity_s", self.activity_s), ("rest_s", self.rest_s)):
            if isinstance(d, tuple):
                if len(d) != 2 or not d[0] < d[1]:
                    raise ValueError(f"{name} range must be ordered (lo, hi), got {d}")

    @staticmethod
    def standard(kind: str, tr_s: float, n_frames: int) -> "ParadigmSpec":
        act, rest = _PARADIGM_TABLE[kind]
        return ParadigmSpec(kind, act, rest, tr_s, n_frames)

    @property
    def randomized(self) -> bool:
        return isinstance(self.activity_s, tuple) or isinstance(self.rest_s, tuple)


def gaussian_volume(dims, voxel_size_mm, seed: int) -> Volume3:
    """I.i.d. standard normal voxels, deterministic under ``seed``."""
    rng = substream(seed, STREAM_FIELD)
    data = rng.standard_normal(int(np.prod(dims)))
    return Volume3(tuple(int(n) for n in dims), tuple(voxel_size_mm), data)


def _kernel_1d(fwhm_mm: float, voxel_mm: float) -> np.ndarray:
    sigma = fwhm_mm / FWHM_PER_SIGMA / voxel_mm
    radius = max(1, int(math.ceil(4.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _component_kernels(kernel: KernelSpec, voxel_size_mm) -> list[list[np.ndarray]]:
    """Per component, the separable 1-D kernels along x, y, z."""
    return [
        [_kernel_1d(f, float(d)) for d in voxel_size_mm]
        for f in kernel.fwhm_mm
    ]


def analytic_scale(kernel: KernelSpec, voxel_size_mm) -> float:
    """Square root of the sum of squares of the composite discrete kernel.

    For a mixture the composite kernel is the weighted sum of component
    kernels, so the sum of squares includes cross terms between components.
    """
    comps = _component_kernels(kernel, voxel_size_mm)
    total = 0.0
    for wc, kc in zip(kernel.weights, comps):
        for wd, kd in zip(kernel.weights, comps):
            prod = 1.0
            for ka, kb in zip(kc, kd):
                if len(ka) < len(kb):
                    ka, kb = kb, ka
                pad = (len(ka) - len(kb)) // 2
                prod *= float(np.dot(ka[pad:pad + len(kb)], kb))
            total += wc * wd * prod
    return math.sqrt(total)


def _convolve_component(data: np.ndarray, kernels_1d) -> np.ndarray:
    out = data
    for axis, k in enumerate(kernels_1d):
        if len(k) > data.shape[axis]:
            raise KernelTooWide(
                f"kernel support {len(k)} exceeds grid extent {data.shape[axis]} on axis {axis}"
            )
        out = ndimage.correlate1d(out, k, axis=axis, mode="constant", cval=0.0)
    return out


def smooth(v: Volume3, kernel: KernelSpec, mask: Mask | None = None,
           rescale: str = "none") -> Volume3:
    """Separable zero-padded convolution with optional standardization.

    ``rescale`` is one of ``none``, ``analytic``, ``empirical`` (see module
    docstring).  The convolution always covers the full grid; the mask is not
    consulted here.
    """
    if rescale not in ("none", "analytic", "empirical"):
        raise ValueError(f"unknown rescale mode {rescale!r}")
    min_fwhm = min(kernel.fwhm_mm)
    if min_fwhm < 0.1 * min(v.voxel_size_mm):
        raise ValueError(
            f"kernel FWHM {min_fwhm} mm below 0.1 voxel ({min(v.voxel_size_mm)} mm)"
        )
    comps = _component_kernels(kernel, v.voxel_size_mm)
    out = np.zeros(v.dims, dtype=np.float64)
    for w, ks in zip(kernel.weights, comps):
        out += w * _convolve_component(v.data, ks)
    if rescale == "analytic":
        out /= analytic_scale(kernel, v.voxel_size_mm)
    elif rescale == "empirical":
        out /= out.std()
    return Volume3(v.dims, v.voxel_size_mm, out, meta=v.meta)


def synth_null_subject(dims, voxel_size_mm, kernel: KernelSpec, mask: Mask,
                       nonstat: NonstationarityField | None = None,
                       seed: int = 0) -> Volume3:
    """One zero-mean correlated null map with interior unit variance.

    With a non-stationarity field, two independent stationary fields (base
    kernel and kernel widened to the maximum gain) are blended with
    gain-derived weights so the local correlation width scales with gain.
    """
    white = gaussian_volume(dims, voxel_size_mm, seed)
    if nonstat is not None:
        gain = nonstat.gain.data
        gmin, gmax = float(gain.min()), float(gain.max())
        if gmax > gmin:
            base = smooth(white, kernel, mask, rescale="analytic")
            wide = smooth(
                gaussian_volume(dims, voxel_size_mm, seed + (1 << 32)),
                kernel.scaled(gmax), mask, rescale="analytic",
            )
            w = np.clip((gain - gmin) / (gmax - gmin), 0.0, 1.0)
            blended = np.sqrt(1.0 - w) * base.data + np.sqrt(w) * wide.data
            return Volume3(tuple(dims), tuple(voxel_size_mm), blended)
        if gmin != 1.0:
            kernel = kernel.scaled(gmin)
    return smooth(white, kernel, mask, rescale="analytic")


def make_gain_bump(dims, voxel_size_mm, high: float = 2.0,
                   radius_frac: float = 0.5) -> NonstationarityField:
    """Smoothly varying gain field: 1 far out, ``high`` at the grid center."""
    if high <= 0:
        raise ValueError("gain must be positive")
    coords = [
        (np.arange(n, dtype=float) - (n - 1) / 2.0) * d
        for n, d in zip(dims, voxel_size_mm)
    ]
    xs, ys, zs = np.meshgrid(*coords, indexing="ij")
    extent = min(n * d for n, d in zip(dims, voxel_size_mm))
    r2 = (xs ** 2 + ys ** 2 + zs ** 2) / (radius_frac * extent / 2.0) ** 2
    bump = np.exp(-0.5 * r2)
    gain = 1.0 + (high - 1.0) * bump
    return NonstationarityField(Volume3(tuple(dims), tuple(voxel_size_mm), gain))


def hrf_double_gamma(t: np.ndarray) -> np.ndarray:
    """Canonical hemodynamic response: gamma peaks at 6 s and 16 s, ratio 1/6."""
    from scipy.stats import gamma as gamma_dist

    h = gamma_dist.pdf(t, a=7.0) - gamma_dist.pdf(t, a=17.0) / 6.0
    peak = h.max()
    return h / peak if peak > 0 else h


def _block_durations(p: ParadigmSpec, total_s: float, rng) -> list[tuple[float, float]]:
    """Alternating (activity, rest) durations covering at least ``total_s``."""
    out = []
    covered = 0.0
    while covered < total_s:
        if p.randomized:
            act = float(rng.uniform(*p.activity_s)) if isinstance(p.activity_s, tuple) else float(p.activity_s)
            rest = float(rng.uniform(*p.rest_s)) if isinstance(p.rest_s, tuple) else float(p.rest_s)
        else:
            act, rest = float(p.activity_s), float(p.rest_s)
        if act <= 0 or rest <= 0:
            raise DurationZero(f"activity/rest durations must be positive, got {act}/{rest}")
        out.append((act, rest))
        covered += act + rest
    return out


def paradigm_regressor(p: ParadigmSpec, seed: int = 0) -> np.ndarray:
    """Boxcar of the paradigm convolved with the canonical response, mean-centered."""
    rng = substream(seed, STREAM_PARADIGM)
    total_s = p.n_frames * p.tr_s
    onsets = _block_durations(p, total_s, rng)
    t = np.arange(p.n_frames) * p.tr_s
    box = np.zeros(p.n_frames)
    cursor = 0.0
    for act, rest in onsets:
        box[(t >= cursor) & (t < cursor + act)] = 1.0
        cursor += act + rest
    hrf_len = int(math.ceil(32.0 / p.tr_s))
    hrf = hrf_double_gamma(np.arange(hrf_len) * p.tr_s)
    reg = np.convolve(box, hrf)[: p.n_frames]
    return reg - reg.mean()


def _drift_basis(n_frames: int, order: int) -> np.ndarray:
    x = np.linspace(-1.0, 1.0, n_frames)
    return np.polynomial.legendre.legvander(x, order)


def ar1_series(noise: Ar1Spec, n_frames: int, n_series: int, rng) -> np.ndarray:
    """(n_frames, n_series) stationary AR(1) draws."""
    innov = rng.standard_normal((n_frames, n_series)) * noise.sigma
    out = np.empty_like(innov)
    if noise.rho == 0.0:
        return innov
    out[0] = innov[0] / math.sqrt(1.0 - noise.rho ** 2)
    for tt in range(1, n_frames):
        out[tt] = noise.rho * out[tt - 1] + innov[tt]
    return out


def first_level_beta(noise: Ar1Spec, p: ParadigmSpec, drift_order: int, seed: int,
                     dims, voxel_size_mm, kernel: KernelSpec, mask: Mask,
                     activation_amplitude: float = 0.0) -> Volume3:
    """Per-subject paradigm beta map from an AR(1) time series GLM.

    Each frame of the simulated series is spatially smoothed, then every
    voxel's series is regressed on [paradigm regressor, Legendre drift
    0..drift_order].  No prewhitening is applied, so temporally correlated
    noise leaks into the betas in a paradigm-dependent way.
    """
    if p.n_frames <= drift_order + 2:
        raise RankDeficientDesign(
            f"{p.n_frames} frames cannot support drift order {drift_order}"
        )
    reg = paradigm_regressor(p, seed)
    design = np.column_stack([reg, _drift_basis(p.n_frames, drift_order)])
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise RankDeficientDesign("design matrix is rank deficient")

    rng = substream(seed, STREAM_FIELD, 1)
    n_vox = int(np.prod(dims))
    series = ar1_series(noise, p.n_frames, n_vox, rng)
    frames = series.reshape((p.n_frames,) + tuple(dims))
    comps = _component_kernels(kernel, voxel_size_mm)
    scale = analytic_scale(kernel, voxel_size_mm)
    for i in range(p.n_frames):
        acc = np.zeros(tuple(dims))
        for w, ks in zip(kernel.weights, comps):
            acc += w * _convolve_component(frames[i], ks)
        frames[i] = acc / scale
    flat = frames.reshape(p.n_frames, n_vox)
    if activation_amplitude != 0.0:
        flat = flat + activation_amplitude * reg[:, None]
    coefs, *_ = np.linalg.lstsq(design, flat, rcond=None)
    return Volume3(tuple(dims), tuple(voxel_size_mm), coefs[0].reshape(tuple(dims)))
