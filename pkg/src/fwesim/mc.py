"""Monte Carlo cluster-extent null distributions.

Each iteration smooths a fresh unit-variance Gaussian noise volume with zero
padding, standardizes it back toward unit variance, thresholds at the
configured z, and records the largest cluster extent inside the mask.  Two
standardization modes are provided:

* ``buggy`` divides by the analytic interior factor only, so the smoothing
  edge attenuation is never compensated: borders rarely cross the threshold,
  effectively shrinking the search volume and under-sizing the null extents
  (the liberal defect).
* ``fixed`` divides by the empirical whole-grid standard deviation, which is
  pulled down by the attenuated borders and therefore restores (indeed
  slightly overshoots) interior variance, yielding larger null extents and
  more stringent thresholds.

Per-iteration noise is seeded by a counter split from the null seed, so
histograms are identical for any worker count or chunking.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .cluster import CONNECTIVITIES, max_extent_binary, structure_for
from .errors import InsufficientIterations
from .rng import STREAM_ITERATION, substream
from .synth import KernelSpec, _component_kernels, _convolve_component, analytic_scale
from .volio import Mask

MODES = ("buggy", "fixed")


@dataclass(frozen=True)
class McNull:
    """Simulated null of the max cluster extent per iteration."""

    extents: np.ndarray
    n_iterations: int
    mode: str
    kernel: KernelSpec
    cdt_z: float
    connectivity: str
    dims: tuple[int, int, int]
    voxel_size_mm: tuple[float, float, float]
    seed: int

    @property
    def extent_counts(self) -> np.ndarray:
        """Histogram over max extents; bin i holds the count of extent i."""
        return np.bincount(self.extents)


def _smoothed_field(dims, kernels_1d, weights, rng) -> np.ndarray:
    white = rng.standard_normal(dims)
    out = np.zeros(dims)
    for w, ks in zip(weights, kernels_1d):
        out += w * _convolve_component(white, ks)
    return out


def mc_build_null(dims, voxel_size_mm, mask: Mask, kernel: KernelSpec,
                  cdt_z: float, connectivity: str, n_iterations: int,
                  mode: str, seed: int) -> McNull:
    """Simulate the max-extent null in one standardization mode."""
    pair = _build(dims, voxel_size_mm, mask, kernel, cdt_z, connectivity,
                  n_iterations, (mode,), seed)
    return pair[mode]


def mc_build_null_pair(dims, voxel_size_mm, mask: Mask, kernel: KernelSpec,
                       cdt_z: float, connectivity: str, n_iterations: int,
                       seed: int) -> tuple[McNull, McNull]:
    """Both modes from the same per-iteration noise fields (single pass).

    Equals two separate ``mc_build_null`` calls with the same seed; the
    smoothing work is just shared.
    """
    pair = _build(dims, voxel_size_mm, mask, kernel, cdt_z, connectivity,
                  n_iterations, MODES, seed)
    return pair["buggy"], pair["fixed"]


def _build(dims, voxel_size_mm, mask, kernel, cdt_z, connectivity,
           n_iterations, modes, seed):
    if n_iterations < 1:
        raise ValueError("need at least one iteration")
    for m in modes:
        if m not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {m!r}")
    dims = tuple(int(n) for n in dims)
    voxel = tuple(float(d) for d in voxel_size_mm)
    structure = structure_for(connectivity)
    kernels = _component_kernels(kernel, voxel)
    a_scale = analytic_scale(kernel, voxel)
    extents = {m: np.zeros(n_iterations, dtype=np.int64) for m in modes}
    inside = mask.inside
    for i in range(n_iterations):
        rng = substream(seed, STREAM_ITERATION, i)
        field = _smoothed_field(dims, kernels, kernel.weights, rng)
        for m in modes:
            scale = a_scale if m == "buggy" else float(field.std())
            extents[m][i] = max_extent_binary((field > cdt_z * scale) & inside, structure)
    return {
        m: McNull(
            extents=extents[m],
            n_iterations=n_iterations,
            mode=m,
            kernel=kernel,
            cdt_z=float(cdt_z),
            connectivity=connectivity,
            dims=dims,
            voxel_size_mm=voxel,
            seed=int(seed),
        )
        for m in modes
    }


def mc_extent_threshold(null: McNull, target_fwe_p: float) -> int:
    """Smallest extent whose exceedance fraction is at or below the target."""
    if not 0.0 < target_fwe_p <= 1.0:
        raise ValueError("target must be in (0, 1]")
    n = null.n_iterations
    if n < 1.0 / target_fwe_p:
        raise InsufficientIterations(
            f"{n} iterations cannot resolve a tail of {target_fwe_p}"
        )
    allowed = int(np.floor(target_fwe_p * n))
    if allowed >= n:
        return 1
    desc = np.sort(null.extents)[::-1]
    return max(1, int(desc[allowed]) + 1)


def mc_cluster_fwe_p(extent: int, null: McNull) -> float:
    """(1 + count of iterations with max extent >= extent) / (n + 1)."""
    cnt = int(np.count_nonzero(null.extents >= extent))
    return (1.0 + cnt) / (null.n_iterations + 1.0)


# --- binary sidecar -------------------------------------------------------

_MAGIC = b"FWEMCN1\x00"


def save_mc_null(null: McNull, path) -> None:
    """Sidecar layout: magic, mode u8, connectivity u8, cdt_z f64, seed i64,
    dims 3xu32, voxel 3xf64, n_components u16 with (fwhm f64, weight f64)
    each, n_iterations u32, then u32 max extent per iteration."""
    head = struct.pack(
        "<8s2Bdq3I3dH",
        _MAGIC,
        MODES.index(null.mode),
        CONNECTIVITIES.index(null.connectivity),
        null.cdt_z,
        null.seed,
        *null.dims,
        *null.voxel_size_mm,
        len(null.kernel.fwhm_mm),
    )
    comps = b"".join(
        struct.pack("<2d", f, w)
        for f, w in zip(null.kernel.fwhm_mm, null.kernel.weights)
    )
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(comps)
        fh.write(struct.pack("<I", null.n_iterations))
        fh.write(null.extents.astype("<u4").tobytes())


def load_mc_null(path) -> McNull:
    raw = open(path, "rb").read()
    head_fmt = "<8s2Bdq3I3dH"
    head_size = struct.calcsize(head_fmt)
    fields = struct.unpack(head_fmt, raw[:head_size])
    magic, mode_code, conn_code, cdt_z, seed = fields[:5]
    dims = fields[5:8]
    voxel = fields[8:11]
    ncomp = fields[11]
    if magic != _MAGIC:
        raise ValueError(f"{path} is not a Monte Carlo null sidecar")
    off = head_size
    fwhms, weights = [], []
    for _ in range(ncomp):
        f, w = struct.unpack_from("<2d", raw, off)
        fwhms.append(f)
        weights.append(w)
        off += 16
    (n,) = struct.unpack_from("<I", raw, off)
    off += 4
    extents = np.frombuffer(raw, dtype="<u4", count=n, offset=off).astype(np.int64)
    kind = "gaussian" if ncomp == 1 else "gaussian_mixture"
    return McNull(
        extents=extents,
        n_iterations=n,
        mode=MODES[mode_code],
        kernel=KernelSpec(kind, tuple(fwhms), tuple(weights)),
        cdt_z=cdt_z,
        connectivity=CONNECTIVITIES[conn_code],
        dims=tuple(int(d) for d in dims),
        voxel_size_mm=tuple(voxel),
        seed=seed,
    )
