"""Campaign orchestration: repeated null analyses against every backend.

A campaign runs ``n_analyses`` random null analyses for each grid cell
(smoothing value), applies the configured inference backends to each, and
aggregates empirical familywise error rates with exact binomial confidence
bands.  Per-analysis results are pure functions of (spec, cell, index), are
checkpointed as one JSON record per analysis, and aggregate to byte-identical
reports for any worker count; interrupted campaigns resume from the records.

Directional accounting: two-sample tests are evaluated two-sided at the total
nominal level (max |t| nulls for resampling backends, doubled tail p for the
parametric ones, both signs labeled for cluster tables); one-sample and
mixed-effects tests are one-sided positive.
"""

from __future__ import annotations

import csv
import hashlib
import json
import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import beta as beta_dist

from . import cluster as _cluster
from . import geometry as _geometry
from . import glm as _glm
from . import mc as _mc
from . import perm as _perm
from . import rft as _rft
from . import synth as _synth
from .cluster import CdtSpec, cdt_to_threshold
from .errors import CampaignCellFailure, ConfigError, FwesimError, MismatchedInputs
from .rng import (
    STREAM_ANALYSIS,
    STREAM_ITERATION,
    STREAM_POOL,
    STREAM_RESAMPLE,
    STREAM_SPLIT,
    substream,
)
from .volio import Mask, Volume4, make_ellipsoid_mask, read_nifti

BACKENDS = (
    "rft_voxel",
    "rft_cluster",
    "bonferroni_voxel",
    "mc_cluster_buggy",
    "mc_cluster_fixed",
    "perm_voxel",
    "perm_cluster",
    "adhoc_extent",
)
CLUSTER_BACKENDS = {"rft_cluster", "mc_cluster_buggy", "mc_cluster_fixed",
                    "perm_cluster", "adhoc_extent"}
DATA_SOURCES = ("synthetic_beta_maps", "synthetic_first_level", "external_nifti_stack")
TESTS = ("one_sample", "two_sample", "mema")


def derive_seed(seed: int, *path: int) -> int:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class AdhocSpec:
    """Fixed-extent thresholding: uncorrected CDT p plus a minimum volume."""

    cdt_p: float
    extent_mm3: float

    def __post_init__(self):
        if not 0.0 < self.cdt_p < 1.0:
            raise ValueError("cdt_p must be in (0, 1)")
        if self.extent_mm3 <= 0:
            raise ValueError("extent_mm3 must be positive")


@dataclass(frozen=True)
class CampaignSpec:
    """Full description of one campaign; every output derives from this."""

    n_analyses: int
    test: str = "two_sample"
    group_size: int = 8
    data_source: str = "synthetic_beta_maps"
    dims: tuple[int, int, int] = (48, 48, 48)
    voxel_size_mm: tuple[float, float, float] = (2.0, 2.0, 2.0)
    mask_semi_axes_mm: tuple[float, float, float] | None = (44.0, 44.0, 40.0)
    kernel: _synth.KernelSpec = field(default_factory=lambda: _synth.KernelSpec.gaussian(6.0))
    smoothing_fwhm_mm: tuple[float, ...] = (0.0,)
    cdt: tuple[CdtSpec, ...] = (CdtSpec(p_uncorrected=0.01),)
    inference: tuple[str, ...] = ("perm_cluster",)
    nominal_fwe: float = 0.05
    seed: int = 0
    pool_size: int | None = 198
    n_resamples: int = 1000
    mc_iterations: int = 2000
    connectivity: str = "faces6"
    nonstat: dict | None = None
    paradigm: _synth.ParadigmSpec | None = None
    ar1: _synth.Ar1Spec | None = None
    drift_order: int = 3
    adhoc: AdhocSpec | None = None
    mema_variance_range: tuple[float, float] = (0.5, 4.0)
    external_paths: tuple[str, ...] | None = None
    external_mask: str | None = None

    def __post_init__(self):
        if self.n_analyses < 1:
            raise ConfigError("n_analyses must be >= 1")
        if not 0.0 < self.nominal_fwe < 1.0:
            raise ConfigError("nominal_fwe must be in (0, 1)")
        if self.test not in TESTS:
            raise ConfigError(f"test must be one of {TESTS}")
        if self.data_source not in DATA_SOURCES:
            raise ConfigError(f"data_source must be one of {DATA_SOURCES}")
        for b in self.inference:
            if b not in BACKENDS:
                raise ConfigError(f"unknown backend {b!r}")
        if not self.inference:
            raise ConfigError("inference list must be nonempty")
        if not self.smoothing_fwhm_mm:
            raise ConfigError("smoothing grid must be nonempty")
        if "adhoc_extent" in self.inference and self.adhoc is None:
            raise ConfigError("adhoc_extent backend needs an adhoc spec")
        if self.data_source == "synthetic_first_level" and (
            self.paradigm is None or self.ar1 is None
        ):
            raise ConfigError("synthetic_first_level needs paradigm and ar1")
        if self.data_source == "external_nifti_stack" and not self.external_paths:
            raise ConfigError("external_nifti_stack needs external_paths")
        if self.test == "two_sample" and self.pool_size is not None:
            if 2 * self.group_size > self.pool_size:
                raise ConfigError("pool too small for two groups")
        if self.test in ("one_sample", "mema") and self.pool_size is not None:
            if self.group_size > self.pool_size:
                raise ConfigError("pool too small for the group")
        if self.test == "mema" and ({"perm_voxel", "perm_cluster"} & set(self.inference)):
            raise ConfigError("resampling backends are not defined for the mema test")

    @property
    def two_sided(self) -> bool:
        return self.test == "two_sample"

    def mask(self) -> Mask:
        if self.external_mask:
            vol = read_nifti(self.external_mask)
            return Mask(vol.dims, vol.data > 0)
        if self.mask_semi_axes_mm is None:
            return Mask.full(self.dims)
        return make_ellipsoid_mask(self.dims, self.voxel_size_mm, self.mask_semi_axes_mm)

    def effective_kernel(self, smoothing_fwhm: float) -> _synth.KernelSpec:
        return self.kernel.widened(smoothing_fwhm)

    def to_config_dict(self) -> dict:
        d = {
            "n_analyses": self.n_analyses,
            "test": self.test,
            "group_size": self.group_size,
            "data_source": self.data_source,
            "dims": list(self.dims),
            "voxel_size_mm": list(self.voxel_size_mm),
            "mask_semi_axes_mm": list(self.mask_semi_axes_mm) if self.mask_semi_axes_mm else None,
            "kernel": self.kernel.label(),
            "smoothing_fwhm_mm": list(self.smoothing_fwhm_mm),
            "cdt": [c.label() for c in self.cdt],
            "inference": list(self.inference),
            "nominal_fwe": self.nominal_fwe,
            "seed": self.seed,
            "pool_size": self.pool_size,
            "n_resamples": self.n_resamples,
            "mc_iterations": self.mc_iterations,
            "connectivity": self.connectivity,
            "nonstat": self.nonstat,
            "paradigm": None,
            "ar1": None,
            "drift_order": self.drift_order,
            "adhoc": None,
            "mema_variance_range": list(self.mema_variance_range),
            "external_paths": list(self.external_paths) if self.external_paths else None,
            "external_mask": self.external_mask,
        }
        if self.paradigm is not None:
            p = self.paradigm
            d["paradigm"] = {
                "kind": p.kind,
                "activity_s": list(p.activity_s) if isinstance(p.activity_s, tuple) else p.activity_s,
                "rest_s": list(p.rest_s) if isinstance(p.rest_s, tuple) else p.rest_s,
                "tr_s": p.tr_s,
                "n_frames": p.n_frames,
            }
        if self.ar1 is not None:
            d["ar1"] = {"rho": self.ar1.rho, "sigma": self.ar1.sigma}
        if self.adhoc is not None:
            d["adhoc"] = {"cdt_p": self.adhoc.cdt_p, "extent_mm3": self.adhoc.extent_mm3}
        return d

    @staticmethod
    def from_config_dict(doc: dict) -> "CampaignSpec":
        return spec_from_config(doc)

    def digest(self) -> str:
        blob = json.dumps(self.to_config_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def parse_kernel(text: str) -> _synth.KernelSpec:
    """Kernel strings: ``gaussian:FWHM`` or ``mix:f1,f2,..:w1,w2,..``."""
    parts = text.strip().split(":")
    try:
        if parts[0] == "gaussian" and len(parts) == 2:
            return _synth.KernelSpec.gaussian(float(parts[1]))
        if parts[0] == "mix" and len(parts) == 3:
            fwhms = [float(x) for x in parts[1].split(",")]
            weights = [float(x) for x in parts[2].split(",")]
            return _synth.KernelSpec.mixture(fwhms, weights)
    except ValueError as exc:
        raise ConfigError(f"bad kernel spec {text!r}: {exc}") from None
    raise ConfigError(f"bad kernel spec {text!r}; use gaussian:F or mix:f1,f2:w1,w2")


def parse_cdt(text) -> CdtSpec:
    """CDT strings: ``p=0.001``, ``z=3.1``, or a bare probability."""
    if isinstance(text, (int, float)):
        return CdtSpec(p_uncorrected=float(text))
    s = str(text).strip()
    try:
        if s.startswith("p="):
            return CdtSpec(p_uncorrected=float(s[2:]))
        if s.startswith("z="):
            return CdtSpec(z_equivalent=float(s[2:]))
        return CdtSpec(p_uncorrected=float(s))
    except ValueError as exc:
        raise ConfigError(f"bad cdt spec {text!r}: {exc}") from None


_CONFIG_KEYS = {
    "n_analyses", "test", "group_size", "data_source", "dims", "voxel_size_mm",
    "mask_semi_axes_mm", "kernel", "smoothing_fwhm_mm", "cdt", "inference",
    "nominal_fwe", "seed", "pool_size", "n_resamples", "mc_iterations",
    "connectivity", "nonstat", "paradigm", "ar1", "drift_order", "adhoc",
    "mema_variance_range", "external_paths", "external_mask",
}


def spec_from_config(doc: dict) -> CampaignSpec:
    """Validate a configuration document; unknown keys are rejected."""
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a mapping")
    unknown = set(doc) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
    if "n_analyses" not in doc:
        raise ConfigError("configuration needs n_analyses")
    kw: dict = {"n_analyses": int(doc["n_analyses"])}
    simple = {
        "test": str, "group_size": int, "data_source": str, "nominal_fwe": float,
        "seed": int, "n_resamples": int, "mc_iterations": int,
        "connectivity": str, "drift_order": int, "external_mask": str,
    }
    for key, cast in simple.items():
        if key in doc and doc[key] is not None:
            kw[key] = cast(doc[key])
    if "pool_size" in doc:
        kw["pool_size"] = None if doc["pool_size"] is None else int(doc["pool_size"])
    for key in ("dims", "voxel_size_mm"):
        if key in doc:
            kw[key] = tuple(doc[key])
    if "mask_semi_axes_mm" in doc:
        v = doc["mask_semi_axes_mm"]
        kw["mask_semi_axes_mm"] = None if v is None else tuple(float(x) for x in v)
    if "kernel" in doc:
        k = doc["kernel"]
        kw["kernel"] = k if isinstance(k, _synth.KernelSpec) else parse_kernel(k)
    if "smoothing_fwhm_mm" in doc:
        kw["smoothing_fwhm_mm"] = tuple(float(x) for x in doc["smoothing_fwhm_mm"])
    if "cdt" in doc:
        kw["cdt"] = tuple(c if isinstance(c, CdtSpec) else parse_cdt(c) for c in doc["cdt"])
    if "inference" in doc:
        kw["inference"] = tuple(doc["inference"])
    if doc.get("nonstat") is not None:
        ns = doc["nonstat"]
        extra = set(ns) - {"high", "radius_frac"}
        if extra:
            raise ConfigError(f"unknown nonstat keys: {sorted(extra)}")
        kw["nonstat"] = {"high": float(ns["high"]),
                         "radius_frac": float(ns.get("radius_frac", 0.5))}
    if doc.get("paradigm") is not None:
        p = doc["paradigm"]
        extra = set(p) - {"kind", "activity_s", "rest_s", "tr_s", "n_frames"}
        if extra:
            raise ConfigError(f"unknown paradigm keys: {sorted(extra)}")
        if "activity_s" in p:
            act = tuple(p["activity_s"]) if isinstance(p["activity_s"], list) else float(p["activity_s"])
            rest = tuple(p["rest_s"]) if isinstance(p["rest_s"], list) else float(p["rest_s"])
            kw["paradigm"] = _synth.ParadigmSpec(p["kind"], act, rest, float(p["tr_s"]), int(p["n_frames"]))
        else:
            kw["paradigm"] = _synth.ParadigmSpec.standard(p["kind"], float(p["tr_s"]), int(p["n_frames"]))
    if doc.get("ar1") is not None:
        kw["ar1"] = _synth.Ar1Spec(float(doc["ar1"]["rho"]), float(doc["ar1"]["sigma"]))
    if doc.get("adhoc") is not None:
        kw["adhoc"] = AdhocSpec(float(doc["adhoc"]["cdt_p"]), float(doc["adhoc"]["extent_mm3"]))
    if "mema_variance_range" in doc:
        kw["mema_variance_range"] = tuple(float(x) for x in doc["mema_variance_range"])
    if doc.get("external_paths") is not None:
        kw["external_paths"] = tuple(doc["external_paths"])
    try:
        return CampaignSpec(**kw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


# --- data pools -----------------------------------------------------------


@dataclass
class _CellData:
    """Masked subject data for one grid cell (one smoothing value)."""

    betas: np.ndarray            # (pool or 0, n_mask) float64
    variances: np.ndarray | None  # (pool,) per-subject within-subject variance
    pooled: bool


def _synth_subject_row(spec: CampaignSpec, mask: Mask, kernel, smoothing, seed: int) -> np.ndarray:
    nonstat = None
    if spec.nonstat is not None:
        nonstat = _synth.make_gain_bump(
            spec.dims, spec.voxel_size_mm,
            high=spec.nonstat["high"], radius_frac=spec.nonstat.get("radius_frac", 0.5),
        )
    if spec.data_source == "synthetic_first_level":
        vol = _synth.first_level_beta(
            spec.ar1, spec.paradigm, spec.drift_order, seed,
            spec.dims, spec.voxel_size_mm, kernel, mask,
        )
    else:
        vol = _synth.synth_null_subject(
            spec.dims, spec.voxel_size_mm, kernel, mask, nonstat=nonstat, seed=seed,
        )
    return vol.data[mask.inside]


def build_cell_data(spec: CampaignSpec, mask: Mask, cell: int) -> _CellData:
    """Subject pool (or empty holder for per-analysis synthesis) for a cell."""
    smoothing = spec.smoothing_fwhm_mm[cell]
    kernel = spec.effective_kernel(smoothing)
    if spec.data_source == "external_nifti_stack":
        rows = []
        for p in spec.external_paths:
            vol = read_nifti(p)
            if isinstance(vol, Volume4):
                rows.extend(vol.data[mask.inside][:, i] for i in range(vol.nt))
            else:
                rows.append(vol.data[mask.inside])
        betas = np.stack(rows, axis=0)
        return _CellData(betas=betas, variances=None, pooled=True)
    variances = None
    if spec.test == "mema":
        lo, hi = spec.mema_variance_range
        n_v = spec.pool_size if spec.pool_size else spec.group_size * spec.n_analyses
        rng = substream(spec.seed, STREAM_POOL, cell, 999_983)
        variances = rng.uniform(lo, hi, size=n_v)
    if spec.pool_size is None:
        return _CellData(betas=np.empty((0, mask.n_inside)), variances=variances, pooled=False)
    rows = [
        _synth_subject_row(spec, mask, kernel, smoothing,
                           derive_seed(spec.seed, STREAM_POOL, cell, subj))
        for subj in range(spec.pool_size)
    ]
    betas = np.stack(rows, axis=0)
    if variances is not None:
        betas = betas * np.sqrt(variances)[:, None]
    return _CellData(betas=betas, variances=variances, pooled=True)


def _analysis_rows(spec: CampaignSpec, data: _CellData, mask: Mask, cell: int,
                   index: int) -> tuple[np.ndarray, np.ndarray | None, np.ndarray | None]:
    """(group-1 rows, group-2 rows or None, variances or None) for one analysis."""
    k = spec.group_size
    if data.pooled:
        n_pool = data.betas.shape[0]
        split_seed = derive_seed(spec.seed, STREAM_SPLIT, cell, index)
        if spec.test == "two_sample":
            g1, g2 = _glm.random_split(n_pool, k, split_seed)
            return data.betas[g1], data.betas[g2], None
        g1 = substream(split_seed, STREAM_SPLIT).permutation(n_pool)[:k]
        v = data.variances[g1] if data.variances is not None else None
        return data.betas[g1], None, v
    smoothing = spec.smoothing_fwhm_mm[cell]
    kernel = spec.effective_kernel(smoothing)
    n_subj = 2 * k if spec.test == "two_sample" else k
    rows = np.stack([
        _synth_subject_row(spec, mask, kernel, smoothing,
                           derive_seed(spec.seed, STREAM_ANALYSIS, cell, index, subj))
        for subj in range(n_subj)
    ], axis=0)
    if spec.test == "two_sample":
        return rows[:k], rows[k:], None
    v = None
    if spec.test == "mema":
        v = data.variances[index * k:(index + 1) * k]
        rows = rows * np.sqrt(v)[:, None]
    return rows, None, v


def _stack_from_rows(rows: np.ndarray, mask: Mask, voxel, variances=None) -> _glm.SubjectStack:
    n = rows.shape[0]
    cube = np.zeros(mask.dims + (n,))
    cube[mask.inside] = rows.T
    betas = Volume4(mask.dims, voxel, n, cube)
    var4 = None
    if variances is not None:
        vc = np.zeros(mask.dims + (n,))
        vc[mask.inside] = np.broadcast_to(variances, (mask.n_inside, n))
        var4 = Volume4(mask.dims, voxel, n, vc)
    return _glm.SubjectStack(betas=betas, variances=var4)


# --- one analysis ---------------------------------------------------------


def _cdt_key(c: CdtSpec) -> str:
    return c.label()


def _backend_key(backend: str, cdt: CdtSpec | None) -> str:
    return backend if cdt is None else f"{backend}|{_cdt_key(cdt)}"


def run_analysis(spec: CampaignSpec, data: _CellData, mask: Mask, cell: int,
                 index: int, mc_nulls: dict | None = None) -> dict:
    """All configured backends on one null analysis; returns the record."""
    voxel = spec.voxel_size_mm
    rows1, rows2, variances = _analysis_rows(spec, data, mask, cell, index)
    stack1 = _stack_from_rows(rows1, mask, voxel, variances)
    stack2 = _stack_from_rows(rows2, mask, voxel) if rows2 is not None else None

    if spec.test == "two_sample":
        result = _glm.two_sample_t(stack1, stack2, mask)
    elif spec.test == "mema":
        result = _glm.mema_t(stack1, mask)
    else:
        result = _glm.one_sample_t(stack1, mask)
    two_sided = spec.two_sided
    is_t_field = result.kind != "mema"
    stat_in_mask = result.stat.data[mask.inside]
    obs_max = float(np.abs(stat_in_mask).max() if two_sided else stat_in_mask.max())
    vox_vol = float(np.prod(voxel))

    needs_rft = any(b in spec.inference for b in ("rft_voxel", "rft_cluster"))
    ctx = None
    if needs_rft:
        smoothness = _geometry.estimate_fwhm_residuals(result.residuals, mask, voxel)
        ctx = _rft.RftContext(
            smoothness=smoothness,
            search_volume_mm3=mask.n_inside * vox_vol,
            df=result.df,
            field_kind="student_t" if is_t_field else "gaussian",
        )

    def stat_threshold(cdt: CdtSpec) -> float:
        eff = cdt if (cdt.df_context is not None or not is_t_field) else cdt.with_df(result.df)
        return cdt_to_threshold(eff)

    def observed_tables(threshold: float):
        tables = [_cluster.label_clusters(result.stat, threshold, mask,
                                          spec.connectivity, sign=1)]
        if two_sided:
            tables.append(_cluster.label_clusters(result.stat, threshold, mask,
                                                  spec.connectivity, sign=-1))
        return tables

    def fold(p: float) -> float:
        return min(1.0, 2.0 * p) if two_sided else p

    backends = {}
    cluster_rows: dict[str, list[dict]] = {}
    needed_cdts = spec.cdt if (CLUSTER_BACKENDS & set(spec.inference)) else ()

    # Resampling nulls for every CDT from one sweep (shared by perm backends).
    perm_nulls: dict[str, _perm.PermNull] = {}
    if "perm_cluster" in spec.inference or "perm_voxel" in spec.inference:
        scheme = "relabel_two_sample" if spec.test == "two_sample" else "sign_flip_one_sample"
        perm_seed = derive_seed(spec.seed, STREAM_RESAMPLE, cell, index)
        cdts_for_perm = list(needed_cdts) if "perm_cluster" in spec.inference else []
        effective = [
            c if (c.df_context is not None or not is_t_field) else c.with_df(result.df)
            for c in cdts_for_perm
        ]
        nulls = _perm.perm_build_nulls(
            stack1, mask, scheme, effective, n_resamples=spec.n_resamples,
            seed=perm_seed, stack2=stack2, two_sided=two_sided,
            connectivity=spec.connectivity,
        ) if effective else [_perm.perm_build_null(
            stack1, mask, scheme, cdt=None, n_resamples=spec.n_resamples,
            seed=perm_seed, stack2=stack2, two_sided=two_sided,
            connectivity=spec.connectivity,
        )]
        if cdts_for_perm:
            perm_nulls = {_cdt_key(c): n for c, n in zip(cdts_for_perm, nulls)}
        else:
            perm_nulls = {"": nulls[0]}

    for cdt in needed_cdts:
        threshold = stat_threshold(cdt)
        tables = observed_tables(threshold)
        rows = []
        for table in tables:
            for c in table.clusters:
                rows.append({"size_voxels": c.size_voxels, "sign": c.sign, "p": {}})
        srt = sorted(range(len(rows)), key=lambda i: (-rows[i]["size_voxels"], i))
        rows = [rows[i] for i in srt]
        cluster_rows[_cdt_key(cdt)] = rows

        if "rft_cluster" in spec.inference:
            ps = [fold(_rft.cluster_fwe_p(r["size_voxels"], cdt, ctx, vox_vol)) for r in rows]
            for r, p in zip(rows, ps):
                r["p"]["rft_cluster"] = p
            backends[_backend_key("rft_cluster", cdt)] = {
                "significant": bool(ps and min(ps) < spec.nominal_fwe),
                "min_p": min(ps) if ps else 1.0,
            }
        for mode in ("buggy", "fixed"):
            name = f"mc_cluster_{mode}"
            if name in spec.inference:
                null = mc_nulls[(_cdt_key(cdt), mode)]
                ps = [fold(_mc.mc_cluster_fwe_p(r["size_voxels"], null)) for r in rows]
                for r, p in zip(rows, ps):
                    r["p"][name] = p
                backends[_backend_key(name, cdt)] = {
                    "significant": bool(ps and min(ps) < spec.nominal_fwe),
                    "min_p": min(ps) if ps else 1.0,
                }
        if "perm_cluster" in spec.inference:
            null = perm_nulls[_cdt_key(cdt)]
            ps = [_perm.perm_cluster_fwe_p(r["size_voxels"], null) for r in rows]
            for r, p in zip(rows, ps):
                r["p"]["perm_cluster"] = p
            backends[_backend_key("perm_cluster", cdt)] = {
                "significant": bool(ps and min(ps) < spec.nominal_fwe),
                "min_p": min(ps) if ps else 1.0,
            }
        if "adhoc_extent" in spec.inference and abs(cdt.tail_p - spec.adhoc.cdt_p) < 1e-12:
            hits = [r for r in rows if r["size_voxels"] * vox_vol >= spec.adhoc.extent_mm3]
            backends[_backend_key("adhoc_extent", cdt)] = {
                "significant": bool(hits),
                "min_p": 0.0 if hits else 1.0,
            }

    if "adhoc_extent" in spec.inference and not any(
        k.startswith("adhoc_extent") for k in backends
    ):
        cdt = CdtSpec(p_uncorrected=spec.adhoc.cdt_p)
        threshold = stat_threshold(cdt)
        hits = []
        for table in observed_tables(threshold):
            hits += [c for c in table.clusters if c.size_mm3 >= spec.adhoc.extent_mm3]
        backends[_backend_key("adhoc_extent", cdt)] = {
            "significant": bool(hits),
            "min_p": 0.0 if hits else 1.0,
        }

    if "rft_voxel" in spec.inference:
        p = fold(_rft.voxel_fwe_p(obs_max, ctx))
        backends["rft_voxel"] = {"significant": bool(p < spec.nominal_fwe), "min_p": p}
    if "bonferroni_voxel" in spec.inference:
        p = fold(_rft.bonferroni_p(obs_max, mask.n_inside,
                                   df=result.df if is_t_field else None))
        backends["bonferroni_voxel"] = {"significant": bool(p < spec.nominal_fwe), "min_p": p}
    if "perm_voxel" in spec.inference:
        null = next(iter(perm_nulls.values()))
        p = _perm.perm_voxel_fwe_p(null.max_stats[0], null)
        backends["perm_voxel"] = {"significant": bool(p < spec.nominal_fwe), "min_p": p}

    return {
        "cell": cell,
        "index": index,
        "smoothing_fwhm_mm": spec.smoothing_fwhm_mm[cell],
        "backends": backends,
        "clusters": cluster_rows,
    }


# --- campaign loop --------------------------------------------------------


_WORKER_CTX: dict = {}


def _run_limited(spec, data, mask, cell, index, mc_nulls):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return run_analysis(spec, data, mask, cell, index, mc_nulls)
    with threadpool_limits(limits=1):
        return run_analysis(spec, data, mask, cell, index, mc_nulls)


def _worker_run(task):
    cell, index = task
    spec = _WORKER_CTX["spec"]
    data = _WORKER_CTX["data"][cell]
    mask = _WORKER_CTX["mask"]
    mc_nulls = _WORKER_CTX["mc_nulls"].get(cell)
    try:
        rec = _run_limited(spec, data, mask, cell, index, mc_nulls)
    except (FwesimError, ValueError, np.linalg.LinAlgError) as exc:
        rec = {"cell": cell, "index": index, "failed": True,
               "error": f"{type(exc).__name__}: {exc}"}
    return cell, index, _record_to_json(rec)


def _record_to_json(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True, separators=(",", ":"))


def _record_path(checkpoint_dir: str, cell: int, index: int) -> str:
    return os.path.join(checkpoint_dir, "records", f"cell{cell:03d}", f"a{index:06d}.json")


def _write_record(path: str, payload: str) -> None:
    os.makedirs(os.path.dirname(path), exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def binomial_ci(k: int, n: int, level: float = 0.95) -> tuple[float, float]:
    """Exact (Clopper-Pearson) binomial confidence interval for k/n."""
    if not 0 <= k <= n or n < 1:
        raise ValueError("need 0 <= k <= n, n >= 1")
    alpha = 1.0 - level
    low = 0.0 if k == 0 else float(beta_dist.ppf(alpha / 2.0, k, n - k + 1))
    high = 1.0 if k == n else float(beta_dist.ppf(1.0 - alpha / 2.0, k + 1, n - k))
    return low, high


@dataclass(frozen=True)
class FweRow:
    backend: str
    test: str
    kernel: str
    nonstat: str
    smoothing_fwhm_mm: float
    cdt_p: float | None
    group_size: int
    n_analyses: int
    n_significant: int

    @property
    def fwe_rate(self) -> float:
        return self.n_significant / self.n_analyses

    def ci(self) -> tuple[float, float]:
        return binomial_ci(self.n_significant, self.n_analyses)


@dataclass(frozen=True)
class FweReport:
    """Empirical FWE per (backend, grid cell) with exact binomial bands."""

    rows: tuple[FweRow, ...]
    spec: CampaignSpec

    def row(self, backend: str, cdt_p: float | None = None,
            smoothing: float | None = None) -> FweRow:
        for r in self.rows:
            if r.backend != backend:
                continue
            if cdt_p is not None and (r.cdt_p is None or abs(r.cdt_p - cdt_p) > 1e-12):
                continue
            if smoothing is not None and abs(r.smoothing_fwhm_mm - smoothing) > 1e-12:
                continue
            return r
        raise KeyError(f"no report row for {backend} cdt={cdt_p} smoothing={smoothing}")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([
                "backend", "test", "kernel", "nonstat", "smoothing_fwhm_mm",
                "cdt_p", "group_size", "n_analyses", "n_significant",
                "fwe_rate", "ci_low", "ci_high",
            ])
            for r in self.rows:
                low, high = r.ci()
                w.writerow([
                    r.backend, r.test, r.kernel, r.nonstat,
                    f"{r.smoothing_fwhm_mm:g}",
                    "" if r.cdt_p is None else f"{r.cdt_p:.6g}",
                    r.group_size, r.n_analyses, r.n_significant,
                    f"{r.fwe_rate:.6g}", f"{low:.6g}", f"{high:.6g}",
                ])


def _campaign_mc_nulls(spec: CampaignSpec, mask: Mask, cell: int) -> dict:
    """Shared Monte Carlo nulls per (cdt, mode) for one cell."""
    out = {}
    modes = [m for m in ("buggy", "fixed") if f"mc_cluster_{m}" in spec.inference]
    if not modes:
        return out
    kernel = spec.effective_kernel(spec.smoothing_fwhm_mm[cell])
    for ci, cdt in enumerate(spec.cdt):
        seed = derive_seed(spec.seed, STREAM_ITERATION, cell, ci)
        if len(modes) == 2:
            buggy, fixed = _mc.mc_build_null_pair(
                spec.dims, spec.voxel_size_mm, mask, kernel, cdt.gaussian_z,
                spec.connectivity, spec.mc_iterations, seed,
            )
            out[(_cdt_key(cdt), "buggy")] = buggy
            out[(_cdt_key(cdt), "fixed")] = fixed
        else:
            out[(_cdt_key(cdt), modes[0])] = _mc.mc_build_null(
                spec.dims, spec.voxel_size_mm, mask, kernel, cdt.gaussian_z,
                spec.connectivity, spec.mc_iterations, modes[0], seed,
            )
    return out


def run_campaign(spec: CampaignSpec, checkpoint_dir: str | None = None,
                 workers: int = 1, resume: bool = False, strict: bool = False,
                 stop_after: int | None = None, progress=None) -> FweReport:
    """Run (or resume) a campaign and aggregate the empirical FWE report.

    ``stop_after`` stops after that many newly computed analyses (the
    checkpoint then holds a partial campaign for later resumption).
    """
    mask = spec.mask()
    records: dict[tuple[int, int], dict] = {}
    if checkpoint_dir:
        os.makedirs(checkpoint_dir, exist_ok=True)
        meta_path = os.path.join(checkpoint_dir, "campaign.json")
        doc = {"config": spec.to_config_dict(), "digest": spec.digest()}
        if os.path.exists(meta_path):
            existing = json.loads(Path(meta_path).read_text())
            if existing.get("digest") != doc["digest"]:
                if not resume:
                    raise ConfigError(
                        f"checkpoint {checkpoint_dir} belongs to a different campaign"
                    )
                raise ConfigError("cannot resume: campaign spec changed")
        else:
            with open(meta_path, "w") as fh:
                json.dump(doc, fh, indent=2, sort_keys=True)

    tasks = []
    for cell in range(len(spec.smoothing_fwhm_mm)):
        for index in range(spec.n_analyses):
            if checkpoint_dir:
                path = _record_path(checkpoint_dir, cell, index)
                if os.path.exists(path):
                    records[(cell, index)] = json.loads(Path(path).read_text())
                    continue
            tasks.append((cell, index))

    if stop_after is not None:
        tasks = tasks[:stop_after]

    if tasks:
        data = {}
        mc_nulls = {}
        needed_cells = sorted({c for c, _ in tasks})
        for cell in needed_cells:
            data[cell] = build_cell_data(spec, mask, cell)
            mc_nulls[cell] = _campaign_mc_nulls(spec, mask, cell)
        _WORKER_CTX.update({
            "spec": spec, "data": data, "mask": mask, "mc_nulls": mc_nulls,
        })
        try:
            if workers > 1:
                ctx = multiprocessing.get_context("fork")
                with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
                    results = pool.map(_worker_run, tasks, chunksize=4)
                    for done, (cell, index, payload) in enumerate(results):
                        records[(cell, index)] = json.loads(payload)
                        if checkpoint_dir:
                            _write_record(_record_path(checkpoint_dir, cell, index), payload)
                        if progress:
                            progress(done + 1, len(tasks))
            else:
                for done, task in enumerate(tasks):
                    cell, index, payload = _worker_run(task)
                    records[(cell, index)] = json.loads(payload)
                    if checkpoint_dir:
                        _write_record(_record_path(checkpoint_dir, cell, index), payload)
                    if progress:
                        progress(done + 1, len(tasks))
        finally:
            _WORKER_CTX.clear()

    failures = [r for r in records.values() if r.get("failed")]
    if strict and failures:
        raise CampaignCellFailure(
            f"{len(failures)} analyses failed, first: {failures[0]['error']}"
        )

    rows = []
    kernel_label = spec.kernel.label()
    nonstat_label = "none" if spec.nonstat is None else f"bump:{spec.nonstat['high']:g}"
    for cell in range(len(spec.smoothing_fwhm_mm)):
        cell_records = [records[(cell, i)] for i in range(spec.n_analyses)
                        if (cell, i) in records and not records[(cell, i)].get("failed")]
        if not cell_records:
            continue
        keys = sorted({k for r in cell_records for k in r["backends"]})
        ordered = [k for b in BACKENDS for k in keys if k.split("|")[0] == b]
        for key in ordered:
            backend = key.split("|")[0]
            cdt_p = parse_cdt(key.split("|")[1]).tail_p if "|" in key else None
            n_sig = sum(1 for r in cell_records if r["backends"][key]["significant"])
            rows.append(FweRow(
                backend=backend,
                test=spec.test,
                kernel=kernel_label,
                nonstat=nonstat_label,
                smoothing_fwhm_mm=spec.smoothing_fwhm_mm[cell],
                cdt_p=cdt_p,
                group_size=spec.group_size,
                n_analyses=len(cell_records),
                n_significant=n_sig,
            ))
    return FweReport(rows=tuple(rows), spec=spec)


def run_adhoc(spec: CampaignSpec, adhoc: AdhocSpec, **kwargs) -> FweReport:
    """Campaign under fixed-extent thresholding only."""
    adhoc_spec = replace(spec, inference=("adhoc_extent",), adhoc=adhoc,
                         cdt=(CdtSpec(p_uncorrected=adhoc.cdt_p),))
    return run_campaign(adhoc_spec, **kwargs)


# --- backend comparison ---------------------------------------------------


@dataclass(frozen=True)
class RatioRow:
    dataset_tag: str
    contrast_tag: str
    cluster_size_voxels: int
    parametric_p: float
    nonparametric_p: float

    @property
    def ratio(self) -> float:
        return self.nonparametric_p / self.parametric_p


@dataclass(frozen=True)
class RatioReport:
    rows: tuple[RatioRow, ...]

    def median_ratio(self) -> float:
        if not self.rows:
            raise ValueError("no ratio rows")
        return float(np.median([r.ratio for r in self.rows]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["dataset_tag", "contrast_tag", "cluster_size_voxels",
                        "parametric_p", "nonparametric_p", "ratio"])
            for r in self.rows:
                w.writerow([r.dataset_tag, r.contrast_tag, r.cluster_size_voxels,
                            f"{r.parametric_p:.6g}", f"{r.nonparametric_p:.6g}",
                            f"{r.ratio:.6g}"])


def compare_backends(records, parametric: str = "rft_cluster",
                     nonparametric: str = "perm_cluster",
                     cdt_key: str | None = None, dataset_tag: str = "campaign",
                     p_min: float = 1e-4, p_max: float = 0.05) -> RatioReport:
    """Per-cluster p-value ratios for two backends run on identical analyses.

    Clusters whose parametric p falls outside [p_min, p_max] are excluded:
    below p_min the resampling resolution alone would inflate ratios.
    """
    rows = []
    for rec in records:
        keys = list(rec["clusters"]) if cdt_key is None else [cdt_key]
        for key in keys:
            if key not in rec["clusters"]:
                raise MismatchedInputs(f"analysis {rec['index']} lacks CDT {key}")
            for ci, cl in enumerate(rec["clusters"][key]):
                pvals = cl["p"]
                if parametric not in pvals or nonparametric not in pvals:
                    raise MismatchedInputs(
                        f"cluster missing {parametric} or {nonparametric} p-value"
                    )
                p_par = pvals[parametric]
                if not (p_min <= p_par <= p_max):
                    continue
                rows.append(RatioRow(
                    dataset_tag=dataset_tag,
                    contrast_tag=f"a{rec['index']:06d}/{key}/c{ci}"
                                 f"{'+' if cl['sign'] > 0 else '-'}",
                    cluster_size_voxels=cl["size_voxels"],
                    parametric_p=p_par,
                    nonparametric_p=pvals[nonparametric],
                ))
    return RatioReport(rows=tuple(rows))


def load_records(checkpoint_dir: str) -> list[dict]:
    """All checkpointed analysis records, in (cell, index) order."""
    root = Path(checkpoint_dir) / "records"
    out = []
    if not root.is_dir():
        return out
    for cell_dir in sorted(root.iterdir()):
        for name in sorted(cell_dir.glob("*.json")):
            out.append(json.loads(name.read_text()))
    return out
