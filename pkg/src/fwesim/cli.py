"""Command-line front end.

Subcommands: ``synth`` (write synthetic null volumes), ``analyze`` (one group
analysis with any backend set), ``campaign`` (empirical FWE campaigns from a
JSON configuration), ``sacf`` and ``smoothness`` (spatial diagnostics), and
``report`` (render figures from report CSVs).

Every command is a pure function of (arguments, configuration, seed); each
writes a run manifest so outputs are reproducible.  Progress goes to stderr,
machine-readable output to files and stdout.  Exit codes: 0 success, 2
configuration error, 3 I/O or file-format error, 4 statistical precondition
failure, 5 strict campaign failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import cluster as _cluster
from . import geometry as _geometry
from . import glm as _glm
from . import harness as _harness
from . import mc as _mc
from . import perm as _perm
from . import rft as _rft
from . import synth as _synth
from . import volio as _volio
from .errors import (
    CampaignCellFailure,
    CdtMissing,
    CdtTooLow,
    ConfigError,
    DegenerateResiduals,
    EmptyOverlap,
    FwesimError,
    GroupTooLarge,
    InsufficientIterations,
    KernelTooWide,
    MalformedHeader,
    MissingVariances,
    RequiresScaling,
    TooFewSubjects,
    TruncatedData,
    UnsupportedDatatype,
)
from .harness import derive_seed, parse_cdt, parse_kernel
from .rng import STREAM_FIELD

_IO_ERRORS = (OSError, MalformedHeader, TruncatedData, UnsupportedDatatype, RequiresScaling)
_PRECONDITION_ERRORS = (
    CdtTooLow, CdtMissing, InsufficientIterations, TooFewSubjects, GroupTooLarge,
    MissingVariances, EmptyOverlap, DegenerateResiduals, KernelTooWide,
)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _triple(text: str, cast=float):
    parts = [cast(x) for x in str(text).split(",")]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise ConfigError(f"expected one or three comma-separated values, got {text!r}")
    return tuple(parts)


def _parse_mask(text: str, dims, voxel_size_mm) -> _volio.Mask:
    try:
        if text == "full":
            return _volio.Mask.full(tuple(dims))
        if text.startswith("ellipsoid:"):
            semi = _triple(text.split(":", 1)[1])
            return _volio.make_ellipsoid_mask(dims, voxel_size_mm, semi)
        vol = _volio.read_nifti(text)
        if vol.dims != tuple(dims):
            raise ConfigError(f"mask dims {vol.dims} do not match data dims {tuple(dims)}")
        return _volio.Mask(vol.dims, vol.data > 0)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _write_manifest(path: Path, command: str, params: dict) -> None:
    doc = {"tool": "fwesim", "version": __version__, "command": command,
           "params": params}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# --- synth ----------------------------------------------------------------


def _cmd_synth(args) -> int:
    dims = _triple(args.dims, int)
    voxel = _triple(args.voxel_size)
    kernel = parse_kernel(args.kernel)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    mask = _volio.Mask.full(dims) if args.mask == "full" else _parse_mask(args.mask, dims, voxel)
    nonstat = None
    if args.nonstat_high is not None:
        nonstat = _synth.make_gain_bump(dims, voxel, high=args.nonstat_high)
    provenance = []
    for i in range(args.n):
        seed = derive_seed(args.seed, STREAM_FIELD, i)
        vol = _synth.synth_null_subject(dims, voxel, kernel, mask,
                                        nonstat=nonstat, seed=seed)
        name = f"subject{i:04d}.nii"
        _volio.write_nifti(vol, out_dir / name, datatype=args.datatype)
        provenance.append((name, seed))
        print(f"{name}\t{seed}")
    _write_manifest(out_dir / "manifest.json", "synth", {
        "kernel": args.kernel, "dims": list(dims), "voxel_size_mm": list(voxel),
        "n": args.n, "seed": args.seed, "mask": args.mask,
        "nonstat_high": args.nonstat_high, "datatype": args.datatype,
        "files": [{"name": n, "seed": s} for n, s in provenance],
    })
    _log(f"wrote {args.n} volumes to {out_dir}")
    return 0


# --- analyze ---------------------------------------------------------------


def _load_stack(paths):
    vols = []
    for p in paths:
        v = _volio.read_nifti(p)
        if isinstance(v, _volio.Volume4):
            vols.extend(v.frame(i) for i in range(v.nt))
        else:
            vols.append(v)
    return _volio.Volume4.from_frames(vols)


def _cmd_analyze(args) -> int:
    backends = [b.strip() for b in args.backends.split(",") if b.strip()]
    for b in backends:
        if b not in _harness.BACKENDS or b == "adhoc_extent":
            raise ConfigError(f"unsupported backend for analyze: {b!r}")
    cdt = parse_cdt(args.cdt)
    betas1 = _load_stack(args.group1)
    if betas1.nt < 2:
        raise ConfigError("need at least 2 input volumes")
    dims, voxel = betas1.dims, betas1.voxel_size_mm
    mask = _parse_mask(args.mask, dims, voxel)
    if mask.n_inside == 0:
        raise ConfigError("mask is empty")

    stack1 = _glm.SubjectStack(betas=betas1)
    stack2 = None
    if args.test == "two_sample":
        if not args.group2:
            raise ConfigError("two_sample needs --group2")
        stack2 = _glm.SubjectStack(betas=_load_stack(args.group2))
        result = _glm.two_sample_t(stack1, stack2, mask)
    elif args.test == "mema":
        if not args.variances:
            raise MissingVariances("mema needs --variances")
        stack1 = _glm.SubjectStack(betas=betas1, variances=_load_stack(args.variances))
        result = _glm.mema_t(stack1, mask)
    else:
        result = _glm.one_sample_t(stack1, mask)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _volio.write_nifti(result.stat, out_dir / "stat.nii", datatype="float64")

    is_t = result.kind != "mema"
    two_sided = args.test == "two_sample"
    threshold = _cluster.cdt_to_threshold(
        cdt.with_df(result.df) if (is_t and cdt.p_uncorrected is not None) else cdt
    )
    tables = [_cluster.label_clusters(result.stat, threshold, mask,
                                      args.connectivity, sign=1)]
    if two_sided:
        tables.append(_cluster.label_clusters(result.stat, threshold, mask,
                                              args.connectivity, sign=-1))
    clusters = [c for t in tables for c in t.clusters]
    clusters.sort(key=lambda c: (-c.size_voxels, c.peak_index))
    vox_vol = float(np.prod(voxel))

    def fold(p):
        return min(1.0, 2.0 * p) if two_sided else p

    ctx = None
    if any(b.startswith(("rft_",)) for b in backends):
        smoothness = _geometry.estimate_fwhm_residuals(result.residuals, mask, voxel)
        ctx = _rft.RftContext(smoothness, mask.n_inside * vox_vol, result.df,
                              "student_t" if is_t else "gaussian")
        _log(f"smoothness estimate: {tuple(round(f, 2) for f in smoothness.fwhm_mm)} mm, "
             f"{smoothness.resels:.1f} resels")

    written = []
    for backend in backends:
        if backend == "rft_cluster":
            ps = [fold(_rft.cluster_fwe_p(c.size_voxels, cdt, ctx, vox_vol)) for c in clusters]
        elif backend in ("mc_cluster_buggy", "mc_cluster_fixed"):
            kernel = _geometry.kernel_from_smoothness(
                _geometry.estimate_fwhm_residuals(result.residuals, mask, voxel,
                                                  source="first_level_average"))
            null = _mc.mc_build_null(dims, voxel, mask, kernel, cdt.gaussian_z,
                                     args.connectivity, args.mc_iterations,
                                     backend.split("_")[-1],
                                     derive_seed(args.seed, 21))
            ps = [fold(_mc.mc_cluster_fwe_p(c.size_voxels, null)) for c in clusters]
        elif backend == "perm_cluster":
            scheme = ("relabel_two_sample" if args.test == "two_sample"
                      else "sign_flip_one_sample")
            null = _perm.perm_build_null(
                stack1, mask, scheme, cdt=cdt.with_df(result.df) if is_t else cdt,
                n_resamples=args.n_resamples, seed=derive_seed(args.seed, 22),
                stack2=stack2, two_sided=two_sided, connectivity=args.connectivity)
            ps = [_perm.perm_cluster_fwe_p(c.size_voxels, null) for c in clusters]
        elif backend == "perm_voxel":
            scheme = ("relabel_two_sample" if args.test == "two_sample"
                      else "sign_flip_one_sample")
            null = _perm.perm_build_null(
                stack1, mask, scheme, cdt=None, n_resamples=args.n_resamples,
                seed=derive_seed(args.seed, 22), stack2=stack2, two_sided=two_sided)
            ps = [_perm.perm_voxel_fwe_p(abs(c.peak_value) if two_sided else c.peak_value, null)
                  for c in clusters]
        elif backend == "rft_voxel":
            ps = [fold(_rft.voxel_fwe_p(abs(c.peak_value) if two_sided else c.peak_value, ctx))
                  for c in clusters]
        elif backend == "bonferroni_voxel":
            ps = [fold(_rft.bonferroni_p(abs(c.peak_value) if two_sided else c.peak_value,
                                         mask.n_inside, df=result.df if is_t else None))
                  for c in clusters]
        table = _cluster.ClusterTable(
            clusters=[_cluster.Cluster(i + 1, c.size_voxels, c.size_mm3, c.peak_value,
                                       c.peak_index, fwe_p=p, sign=c.sign)
                      for i, (c, p) in enumerate(zip(clusters, ps))],
            connectivity=args.connectivity, threshold_used=threshold)
        path = out_dir / f"clusters_{backend}.csv"
        table.write_csv(path)
        written.append(path.name)

    _write_manifest(out_dir / "manifest.json", "analyze", {
        "test": args.test, "group1": list(args.group1),
        "group2": list(args.group2) if args.group2 else None,
        "variances": list(args.variances) if args.variances else None,
        "mask": args.mask, "cdt": args.cdt, "backends": backends,
        "connectivity": args.connectivity, "n_resamples": args.n_resamples,
        "mc_iterations": args.mc_iterations, "seed": args.seed,
        "outputs": ["stat.nii", *written],
    })
    _log(f"analyze: {len(clusters)} clusters at threshold {threshold:.3f}; "
         f"outputs in {out_dir}")
    return 0


# --- campaign ---------------------------------------------------------------


def _cmd_campaign(args) -> int:
    doc = json.loads(Path(args.config).read_text())
    spec = _harness.spec_from_config(doc)
    total = len(spec.smoothing_fwhm_mm) * spec.n_analyses

    def progress(done, n_tasks):
        if done % 25 == 0 or done == n_tasks:
            _log(f"campaign: {done}/{n_tasks} analyses")

    report = _harness.run_campaign(
        spec, checkpoint_dir=args.checkpoint, workers=args.workers,
        resume=args.resume, strict=args.strict, progress=progress)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(out)
    _log(f"campaign: report with {len(report.rows)} rows -> {out} ({total} analyses)")
    if args.ratio_out and args.checkpoint:
        records = [r for r in _harness.load_records(args.checkpoint) if not r.get("failed")]
        ratio = _harness.compare_backends(records)
        ratio.write_csv(args.ratio_out)
        _log(f"campaign: ratio report with {len(ratio.rows)} rows -> {args.ratio_out}")
    if args.figures:
        from . import figures as _figures

        png = _figures.fwe_report_figure(out, nominal=spec.nominal_fwe)
        _log(f"campaign: figure -> {png}")
        if args.ratio_out:
            png = _figures.ratio_figure(args.ratio_out)
            _log(f"campaign: figure -> {png}")
    return 0


# --- diagnostics ------------------------------------------------------------


def _cmd_sacf(args) -> int:
    maps = []
    for p in args.inputs:
        v = _volio.read_nifti(p)
        if isinstance(v, _volio.Volume4):
            maps.extend(v.frame(i) for i in range(v.nt))
        else:
            maps.append(v)
    mask = _parse_mask(args.mask, maps[0].dims, maps[0].voxel_size_mm)
    curve = _geometry.estimate_sacf(maps, mask, args.max_lag)
    curve.write_csv(args.out)
    _log(f"sacf: {len(curve.distances_mm)} lags over {curve.n_maps} maps -> {args.out}")
    if args.figures:
        from . import figures as _figures

        png = _figures.sacf_figure(args.out, reference_fwhm_mm=args.reference_fwhm)
        _log(f"sacf: figure -> {png}")
    return 0


def _cmd_smoothness(args) -> int:
    vol = _volio.read_nifti(args.input)
    if not isinstance(vol, _volio.Volume4):
        raise ConfigError("smoothness needs a 4-D residual stack")
    mask = _parse_mask(args.mask, vol.dims, vol.voxel_size_mm)
    est = _geometry.estimate_fwhm_residuals(vol, mask)
    out = Path(args.out)
    with open(out, "w", newline="") as fh:
        fh.write("fwhm_x_mm,fwhm_y_mm,fwhm_z_mm,resels,source\n")
        fh.write(",".join(f"{f:.6g}" for f in est.fwhm_mm)
                 + f",{est.resels:.6g},{est.source}\n")
    _log(f"smoothness: {tuple(round(f, 2) for f in est.fwhm_mm)} mm -> {out}")
    if args.roughness_out:
        maps = [vol.frame(i) for i in range(vol.nt)]
        rough = _geometry.roughness_map(maps, mask)
        _volio.write_nifti(rough.inverse_roughness, args.roughness_out, datatype="float64")
        _log(f"smoothness: inverse-roughness map -> {args.roughness_out}")
    return 0


def _cmd_report(args) -> int:
    from . import figures as _figures

    wrote = []
    if args.fwe:
        wrote.append(_figures.fwe_report_figure(args.fwe))
    if args.ratio:
        wrote.append(_figures.ratio_figure(args.ratio))
    if args.sacf:
        wrote.append(_figures.sacf_figure(args.sacf, reference_fwhm_mm=args.reference_fwhm))
    if args.mc_null:
        nulls = [_mc.load_mc_null(p) for p in args.mc_null]
        out = Path(args.mc_null[0]).with_suffix(".png")
        wrote.append(_figures.mc_null_figure(nulls, out))
    if args.incidence:
        vol = _volio.read_nifti(args.incidence)
        wrote.append(_figures.slice_montage(vol, Path(args.incidence).with_suffix(".png")))
    if not wrote:
        raise ConfigError("report: nothing to render (pass --fwe/--ratio/--sacf/...)")
    for p in wrote:
        _log(f"report: figure -> {p}")
    return 0


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="fwesim",
        description="Voxel- and cluster-wise FWE inference on 3-D statistic volumes, "
                    "with a synthetic-null simulation harness.",
    )
    ap.add_argument("--version", action="version", version=f"fwesim {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write synthetic null volumes")
    p.add_argument("--kernel", required=True, help="gaussian:F or mix:f1,f2:w1,w2 (mm FWHM)")
    p.add_argument("--dims", required=True, help="grid size, N or nx,ny,nz")
    p.add_argument("--voxel-size", default="2", help="voxel size in mm, V or vx,vy,vz")
    p.add_argument("--n", type=int, required=True, help="number of volumes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mask", default="full", help="full | ellipsoid:a,b,c | mask.nii")
    p.add_argument("--nonstat-high", type=float, default=None,
                   help="center gain of a non-stationarity bump")
    p.add_argument("--datatype", default="float64", choices=_volio.SUPPORTED_DATATYPES)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("analyze", help="one group analysis with selected backends")
    p.add_argument("--test", choices=("one_sample", "two_sample", "mema"), required=True)
    p.add_argument("--group1", nargs="+", required=True, help="beta map paths")
    p.add_argument("--group2", nargs="*", default=None)
    p.add_argument("--variances", nargs="*", default=None)
    p.add_argument("--mask", required=True, help="full | ellipsoid:a,b,c | mask.nii")
    p.add_argument("--cdt", default="p=0.01", help="p=0.01 or z=2.3")
    p.add_argument("--backends", default="perm_cluster",
                   help="comma-separated backend list")
    p.add_argument("--connectivity", default="faces6", choices=_cluster.CONNECTIVITIES)
    p.add_argument("--n-resamples", type=int, default=1000)
    p.add_argument("--mc-iterations", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("campaign", help="run an FWE campaign from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="FWE report CSV path")
    p.add_argument("--checkpoint", default=None, help="checkpoint directory")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--strict", action="store_true",
                   help="fail (exit 5) if any analysis errored")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--ratio-out", default=None,
                   help="also write a parametric/nonparametric ratio CSV")
    p.add_argument("--figures", action="store_true",
                   help="render PNG figures next to the CSVs")
    p.set_defaults(func=_cmd_campaign)

    p = sub.add_parser("sacf", help="estimate the spatial autocorrelation function")
    p.add_argument("inputs", nargs="+", help="statistic/difference maps")
    p.add_argument("--mask", required=True)
    p.add_argument("--max-lag", type=float, default=20.0, help="largest lag in mm")
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--figures", action="store_true")
    p.add_argument("--reference-fwhm", type=float, default=None,
                   help="overlay a squared-exponential reference (mm FWHM)")
    p.set_defaults(func=_cmd_sacf)

    p = sub.add_parser("smoothness", help="residual-based FWHM/RESEL estimate")
    p.add_argument("input", help="4-D residual stack (NIfTI)")
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--roughness-out", default=None,
                   help="also write the inverse-roughness map (NIfTI)")
    p.set_defaults(func=_cmd_smoothness)

    p = sub.add_parser("report", help="render figures from report CSVs")
    p.add_argument("--fwe", default=None, help="FWE report CSV")
    p.add_argument("--ratio", default=None, help="ratio report CSV")
    p.add_argument("--sacf", default=None, help="SACF CSV")
    p.add_argument("--reference-fwhm", type=float, default=None)
    p.add_argument("--mc-null", nargs="*", default=None, help="MC null sidecars")
    p.add_argument("--incidence", default=None, help="incidence map NIfTI")
    p.set_defaults(func=_cmd_report)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _log(f"error: {exc}")
        return 2
    except _IO_ERRORS as exc:
        _log(f"error: {exc}")
        return 3
    except _PRECONDITION_ERRORS as exc:
        _log(f"error: {exc}")
        return 4
    except CampaignCellFailure as exc:
        _log(f"error: {exc}")
        return 5
    except FwesimError as exc:
        _log(f"error: {exc}")
        return 4


if __name__ == "__main__":
    sys.exit(main())
