"""Non-parametric FWE inference by max-statistic resampling.

Group labels are permuted (two-sample) or subject maps sign-flipped
(one-sample); each resample records the maximum statistic over the mask and,
when a cluster defining threshold is configured, the maximum cluster extent.
Resample 0 is always the identity, so observed data are included in their own
null and no p-value can reach 0.  When the number of distinct resamples does
not exceed the request, the scheme enumerates them exhaustively.

Resamples are generated up front from one seeded stream, so results are
identical for any worker count or chunking.
"""

from __future__ import annotations

import itertools
import math
import struct
from dataclasses import dataclass

import numpy as np

from .cluster import CdtSpec, cdt_to_threshold, structure_for
from .errors import CdtMissing, TooFewSubjects
from .glm import SubjectStack
from .rng import STREAM_RESAMPLE, substream
from .volio import Mask

SCHEMES = ("relabel_two_sample", "sign_flip_one_sample")

_CHUNK = 128


@dataclass(frozen=True)
class PermNull:
    """Null distribution of the maximum statistic (and extent) per resample."""

    max_stats: np.ndarray
    max_extents: np.ndarray | None
    n_resamples: int
    scheme: str
    cdt: CdtSpec | None
    seed: int
    two_sided: bool = False
    exhaustive: bool = False
    threshold_used: float = float("nan")
    connectivity: str = "faces6"

    @property
    def smallest_p(self) -> float:
        return 1.0 / self.n_resamples


def sign_matrix(n: int, n_resamples: int, seed: int) -> tuple[np.ndarray, bool]:
    """(R, n) matrix of +-1 flips; row 0 is all +1.  Exhaustive if 2^n <= R."""
    total = 2 ** n
    if total <= n_resamples:
        bits = (np.arange(total)[:, None] >> np.arange(n)[None, :]) & 1
        return 1.0 - 2.0 * bits.astype(np.float64), True
    rng = substream(seed, STREAM_RESAMPLE)
    signs = 1.0 - 2.0 * rng.integers(0, 2, size=(n_resamples, n)).astype(np.float64)
    signs[0] = 1.0
    return signs, False


def relabel_matrix(n: int, n1: int, n_resamples: int, seed: int) -> tuple[np.ndarray, bool]:
    """(R, n) 0/1 group-1 membership matrix; row 0 is the observed labeling.

    Exhaustive over all n-choose-n1 assignments when that count does not
    exceed the request; otherwise relabelings are drawn uniformly with
    replacement.
    """
    total = math.comb(n, n1)
    if total <= n_resamples:
        w = np.zeros((total, n))
        for i, combo in enumerate(itertools.combinations(range(n), n1)):
            w[i, list(combo)] = 1.0
        return w, True
    rng = substream(seed, STREAM_RESAMPLE)
    w = np.zeros((n_resamples, n))
    w[0, :n1] = 1.0
    for i in range(1, n_resamples):
        w[i, rng.permutation(n)[:n1]] = 1.0
    return w, False


def _mask_box(mask: Mask):
    xs, ys, zs = np.nonzero(mask.inside)
    box = tuple(slice(int(a.min()), int(a.max()) + 1) for a in (xs, ys, zs))
    inside_box = mask.inside[box]
    return box, inside_box


def _resampling_pass(stack, mask, scheme, cdts, n_resamples, seed, stack2,
                     two_sided, connectivity):
    """Shared engine: one resampling sweep, max extents for every CDT."""
    if scheme not in SCHEMES:
        raise ValueError(f"scheme must be one of {SCHEMES}, got {scheme!r}")
    if n_resamples < 1:
        raise ValueError("need at least one resample")

    if scheme == "relabel_two_sample":
        if stack2 is None:
            raise TooFewSubjects("two-sample scheme needs a second group")
        if stack.n_subjects < 2 or stack2.n_subjects < 2:
            raise TooFewSubjects("both groups need at least 2 subjects")
        b = np.concatenate(
            [stack.betas.data[mask.inside], stack2.betas.data[mask.inside]], axis=1
        ).T  # (n, m)
        n1 = stack.n_subjects
        n = b.shape[0]
        df = n - 2
        weights, exhaustive = relabel_matrix(n, n1, n_resamples, seed)
    else:
        if stack.n_subjects < 2:
            raise TooFewSubjects("sign flipping needs at least 2 subjects")
        b = stack.betas.data[mask.inside].T  # (n, m)
        n = b.shape[0]
        n1 = n
        df = n - 1
        weights, exhaustive = sign_matrix(n, n_resamples, seed)

    r_total = weights.shape[0]
    thresholds = []
    structure = None
    box_inside = None
    box_shape = None
    if cdts:
        for cdt in cdts:
            eff = cdt if cdt.df_context is not None else cdt.with_df(df)
            thresholds.append(cdt_to_threshold(eff))
        structure = structure_for(connectivity)
        _, box_inside = _mask_box(mask)
        box_shape = box_inside.shape

    # float32 at campaign scale: the chunked pass is memory-bandwidth bound
    # and t values are only compared to thresholds; small problems stay in
    # float64 so exhaustive nulls match enumeration oracles exactly.
    dt = np.float32 if b.shape[1] >= 4096 else np.float64
    bw = np.ascontiguousarray(b, dtype=dt)
    q_tot = (bw * bw).sum(axis=0, dtype=dt)
    s_tot = bw.sum(axis=0, dtype=dt)
    max_stats = np.empty(r_total)
    extents = [np.empty(r_total, dtype=np.int64) for _ in thresholds]

    from .cluster import batch_max_extents

    n2 = n - n1
    # Pooled sum of squares needs no second matrix product:
    # sum over both groups of (b - group mean)^2 = Qtot - n1*m1^2 - n2*m2^2.
    for lo in range(0, r_total, _CHUNK):
        hi = min(lo + _CHUNK, r_total)
        w = np.ascontiguousarray(weights[lo:hi], dtype=dt)
        s1 = w @ bw
        if scheme == "relabel_two_sample":
            m1 = s1
            m1 /= n1
            m2 = s_tot - n1 * m1
            m2 /= n2
            ss = q_tot - n1 * (m1 * m1) - n2 * (m2 * m2)
            np.maximum(ss, 0.0, out=ss)
            ss *= (1.0 / n1 + 1.0 / n2) / df
            denom = np.sqrt(ss, out=ss)
            diff = m1
            diff -= m2
        else:
            mean = s1
            mean /= n
            ss = q_tot - n * (mean * mean)
            np.maximum(ss, 0.0, out=ss)
            ss /= (n - 1) * n
            denom = np.sqrt(ss, out=ss)
            diff = mean
        with np.errstate(divide="ignore", invalid="ignore"):
            t = diff / denom
        t[denom == 0.0] = 0.0

        hi_side = t.max(axis=1)
        if two_sided:
            np.maximum(hi_side, -t.min(axis=1), out=hi_side)
            np.abs(t, out=t)
        max_stats[lo:hi] = hi_side
        for thr, ext in zip(thresholds, extents):
            fields = np.zeros((hi - lo,) + box_shape, dtype=bool)
            fields[:, box_inside] = t > thr
            ext[lo:hi] = batch_max_extents(fields, structure)

    return max_stats, extents, thresholds, exhaustive, r_total


def perm_build_null(stack: SubjectStack, mask: Mask, scheme: str,
                    cdt: CdtSpec | None = None, n_resamples: int = 1000,
                    seed: int = 0, stack2: SubjectStack | None = None,
                    two_sided: bool = False,
                    connectivity: str = "faces6") -> PermNull:
    """Build the max-statistic (and max-extent) null for one analysis."""
    cdts = [cdt] if cdt is not None else []
    max_stats, extents, thresholds, exhaustive, r_total = _resampling_pass(
        stack, mask, scheme, cdts, n_resamples, seed, stack2, two_sided, connectivity
    )
    return PermNull(
        max_stats=max_stats,
        max_extents=extents[0] if extents else None,
        n_resamples=r_total,
        scheme=scheme,
        cdt=cdt,
        seed=seed,
        two_sided=two_sided,
        exhaustive=exhaustive,
        threshold_used=thresholds[0] if thresholds else float("nan"),
        connectivity=connectivity,
    )


def perm_build_nulls(stack: SubjectStack, mask: Mask, scheme: str,
                     cdts, n_resamples: int = 1000, seed: int = 0,
                     stack2: SubjectStack | None = None, two_sided: bool = False,
                     connectivity: str = "faces6") -> list[PermNull]:
    """One null per CDT from a single resampling sweep.

    Identical to repeated ``perm_build_null`` calls with the same seed; the
    statistic maps are just computed once.
    """
    cdts = list(cdts)
    max_stats, extents, thresholds, exhaustive, r_total = _resampling_pass(
        stack, mask, scheme, cdts, n_resamples, seed, stack2, two_sided, connectivity
    )
    return [
        PermNull(
            max_stats=max_stats,
            max_extents=ext,
            n_resamples=r_total,
            scheme=scheme,
            cdt=cdt,
            seed=seed,
            two_sided=two_sided,
            exhaustive=exhaustive,
            threshold_used=thr,
            connectivity=connectivity,
        )
        for cdt, ext, thr in zip(cdts, extents, thresholds)
    ]


def perm_voxel_fwe_p(stat_value: float, null: PermNull) -> float:
    """Proportion of the max-statistic null at or above the value."""
    return float(np.count_nonzero(null.max_stats >= stat_value)) / null.n_resamples


def perm_cluster_fwe_p(extent: int, null: PermNull) -> float:
    """Proportion of the max-extent null at or above the extent."""
    if null.max_extents is None:
        raise CdtMissing("null was built without a cluster defining threshold")
    return float(np.count_nonzero(null.max_extents >= extent)) / null.n_resamples


# --- binary sidecar -------------------------------------------------------

_MAGIC = b"FWEPRM1\x00"


def save_perm_null(null: PermNull, path) -> None:
    """Sidecar layout: magic, scheme u8, two_sided u8, has_cdt u8,
    exhaustive u8, seed i64, threshold f64, connectivity u8, n u32, then
    f64 max statistic per resample and, with a CDT, u32 max extent each."""
    scheme_code = SCHEMES.index(null.scheme)
    has_cdt = null.max_extents is not None
    from .cluster import CONNECTIVITIES

    head = struct.pack(
        "<8s4Bqd B I",
        _MAGIC, scheme_code, int(null.two_sided), int(has_cdt), int(null.exhaustive),
        null.seed, null.threshold_used,
        CONNECTIVITIES.index(null.connectivity), null.n_resamples,
    )
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(null.max_stats.astype("<f8").tobytes())
        if has_cdt:
            fh.write(null.max_extents.astype("<u4").tobytes())


def load_perm_null(path) -> PermNull:
    from .cluster import CONNECTIVITIES

    raw = open(path, "rb").read()
    head_fmt = "<8s4Bqd B I"
    head_size = struct.calcsize(head_fmt)
    magic, scheme_code, two_sided, has_cdt, exhaustive, seed, threshold, conn, n = struct.unpack(
        head_fmt, raw[:head_size]
    )
    if magic != _MAGIC:
        raise ValueError(f"{path} is not a resampling-null sidecar")
    off = head_size
    max_stats = np.frombuffer(raw, dtype="<f8", count=n, offset=off).astype(np.float64)
    off += 8 * n
    max_extents = None
    if has_cdt:
        max_extents = np.frombuffer(raw, dtype="<u4", count=n, offset=off).astype(np.int64)
    return PermNull(
        max_stats=max_stats,
        max_extents=max_extents,
        n_resamples=n,
        scheme=SCHEMES[scheme_code],
        cdt=None,
        seed=seed,
        two_sided=bool(two_sided),
        exhaustive=bool(exhaustive),
        threshold_used=threshold,
        connectivity=CONNECTIVITIES[conn],
    )
