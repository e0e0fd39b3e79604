"""Volume data model and a minimal, bit-exact NIfTI-1 reader/writer.

Volumes are immutable value objects carrying a dense scalar grid plus voxel
geometry.  The canonical linear order of a grid is x-fastest (the NIfTI
payload order); arrays are exposed as ``data[x, y, z]`` and serialized with
``ravel(order="F")``.

Only single-file NIfTI-1 (magic ``n+1``) is written; reading also accepts the
``ni1`` header/data pair.  Orientation metadata is preserved verbatim across
a read/write round trip but is never interpreted: all analysis runs in voxel
space with voxel sizes in millimeters.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    DimMismatch,
    MalformedHeader,
    RequiresScaling,
    TruncatedData,
    UnsupportedDatatype,
)

# 348-byte NIfTI-1 header, field order per the standard.
_HDR_FMT = "i10s18sihBB8h3f4h8f3fh2B4f2i80s24s2h6f12f16s4s"
_HDR_SIZE = 348
assert struct.calcsize("<" + _HDR_FMT) == _HDR_SIZE

_MAGIC_SINGLE = b"n+1\x00"
_MAGIC_PAIR = b"ni1\x00"

# datatype code -> numpy dtype (native order)
_DTYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
}
_DTYPE_CODES = {v.name: k for k, v in _DTYPES.items()}
SUPPORTED_DATATYPES = tuple(sorted(_DTYPE_CODES))


@dataclass(frozen=True)
class NiftiMeta:
    """Header fields carried through a round trip but ignored by analysis."""

    data_type: bytes = b""
    db_name: bytes = b""
    extents: int = 0
    session_error: int = 0
    regular: int = 0
    dim_info: int = 0
    intent_p: tuple[float, float, float] = (0.0, 0.0, 0.0)
    intent_code: int = 0
    slice_start: int = 0
    pixdim0: float = 0.0
    pixdim_t: float = 0.0
    pixdim_rest: tuple[float, float, float] = (0.0, 0.0, 0.0)
    slice_end: int = 0
    slice_code: int = 0
    xyzt_units: int = 0
    cal_max: float = 0.0
    cal_min: float = 0.0
    slice_duration: float = 0.0
    toffset: float = 0.0
    glmax: int = 0
    glmin: int = 0
    descrip: bytes = b""
    aux_file: bytes = b""
    qform_code: int = 0
    sform_code: int = 0
    quatern: tuple[float, float, float] = (0.0, 0.0, 0.0)
    qoffset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    srow_x: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    srow_y: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    srow_z: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    intent_name: bytes = b""


def _check_geometry(dims, voxel_size_mm):
    if len(dims) != 3 or any(int(n) <= 0 for n in dims):
        raise ValueError(f"dims must be three positive counts, got {dims!r}")
    vs = np.asarray(voxel_size_mm, dtype=float)
    if vs.shape != (3,) or not np.all(np.isfinite(vs)) or np.any(vs <= 0):
        raise ValueError(f"voxel sizes must be three positive finite mm, got {voxel_size_mm!r}")


@dataclass(frozen=True)
class Volume3:
    """Dense 3-D scalar grid with voxel geometry."""

    dims: tuple[int, int, int]
    voxel_size_mm: tuple[float, float, float]
    data: np.ndarray
    meta: NiftiMeta | None = None

    def __post_init__(self):
        _check_geometry(self.dims, self.voxel_size_mm)
        a = np.asarray(self.data, dtype=np.float64)
        if a.size != int(np.prod(self.dims)):
            raise ValueError(f"data has {a.size} values, dims {self.dims} imply {np.prod(self.dims)}")
        object.__setattr__(self, "data", a.reshape(self.dims, order="F") if a.ndim == 1 else a.reshape(self.dims))
        self.data.setflags(write=False)

    @property
    def voxel_volume_mm3(self) -> float:
        return float(np.prod(self.voxel_size_mm))

    def with_data(self, data: np.ndarray) -> "Volume3":
        return replace(self, data=np.asarray(data, dtype=np.float64))


@dataclass(frozen=True)
class Volume4:
    """Stack of frames (time points or subjects) over one Volume3 geometry."""

    dims: tuple[int, int, int]
    voxel_size_mm: tuple[float, float, float]
    nt: int
    data: np.ndarray
    meta: NiftiMeta | None = None

    def __post_init__(self):
        _check_geometry(self.dims, self.voxel_size_mm)
        if int(self.nt) <= 0:
            raise ValueError(f"nt must be positive, got {self.nt}")
        a = np.asarray(self.data, dtype=np.float64)
        want = int(np.prod(self.dims)) * int(self.nt)
        if a.size != want:
            raise ValueError(f"data has {a.size} values, expected {want}")
        shape = self.dims + (int(self.nt),)
        object.__setattr__(self, "data", a.reshape(shape, order="F") if a.ndim == 1 else a.reshape(shape))
        self.data.setflags(write=False)

    def frame(self, i: int) -> Volume3:
        return Volume3(self.dims, self.voxel_size_mm, self.data[..., i], meta=self.meta)

    @staticmethod
    def from_frames(frames: list[Volume3]) -> "Volume4":
        if not frames:
            raise ValueError("need at least one frame")
        base = frames[0]
        for f in frames[1:]:
            if f.dims != base.dims:
                raise DimMismatch(f"frame dims {f.dims} != {base.dims}")
        stack = np.stack([f.data for f in frames], axis=-1)
        return Volume4(base.dims, base.voxel_size_mm, len(frames), stack, meta=base.meta)


@dataclass(frozen=True)
class Mask:
    """Boolean analysis region over a grid."""

    dims: tuple[int, int, int]
    inside: np.ndarray
    n_inside: int = field(init=False)

    def __post_init__(self):
        a = np.asarray(self.inside, dtype=bool)
        if a.size != int(np.prod(self.dims)):
            raise ValueError("mask size does not match dims")
        a = a.reshape(self.dims, order="F") if a.ndim == 1 else a.reshape(self.dims)
        object.__setattr__(self, "inside", a)
        self.inside.setflags(write=False)
        object.__setattr__(self, "n_inside", int(a.sum()))
        if self.n_inside < 1:
            raise ValueError("mask must contain at least one voxel")

    @staticmethod
    def full(dims: tuple[int, int, int]) -> "Mask":
        return Mask(dims, np.ones(dims, dtype=bool))


def make_ellipsoid_mask(dims, voxel_size_mm, semi_axes_mm) -> Mask:
    """Mask of voxels whose centers fall inside the ellipsoid about the grid center."""
    _check_geometry(dims, voxel_size_mm)
    semi = np.asarray(semi_axes_mm, dtype=float)
    if semi.shape != (3,) or np.any(semi <= 0):
        raise ValueError(f"semi-axes must be three positive mm values, got {semi_axes_mm!r}")
    coords = [
        (np.arange(n, dtype=float) - (n - 1) / 2.0) * d
        for n, d in zip(dims, voxel_size_mm)
    ]
    xs, ys, zs = np.meshgrid(*coords, indexing="ij")
    q = (xs / semi[0]) ** 2 + (ys / semi[1]) ** 2 + (zs / semi[2]) ** 2
    return Mask(tuple(int(n) for n in dims), q <= 1.0)


# --- NIfTI-1 ------------------------------------------------------------


def _parse_header(raw: bytes, order: str):
    f = struct.unpack(order + _HDR_FMT, raw)
    keys = (
        "sizeof_hdr data_type db_name extents session_error regular dim_info".split()
    )
    out = dict(zip(keys, f[:7]))
    out["dim"] = f[7:15]
    out["intent_p"] = f[15:18]
    out["intent_code"], out["datatype"], out["bitpix"], out["slice_start"] = f[18:22]
    out["pixdim"] = f[22:30]
    out["vox_offset"], out["scl_slope"], out["scl_inter"] = f[30:33]
    out["slice_end"], out["slice_code"], out["xyzt_units"] = f[33:36]
    out["cal_max"], out["cal_min"], out["slice_duration"], out["toffset"] = f[36:40]
    out["glmax"], out["glmin"], out["descrip"], out["aux_file"] = f[40:44]
    out["qform_code"], out["sform_code"] = f[44:46]
    out["quatern"] = f[46:49]
    out["qoffset"] = f[49:52]
    out["srow_x"] = f[52:56]
    out["srow_y"] = f[56:60]
    out["srow_z"] = f[60:64]
    out["intent_name"], out["magic"] = f[64:66]
    return out


def _strip(b: bytes) -> bytes:
    return b.rstrip(b"\x00")


def read_nifti(path) -> Volume3 | Volume4:
    """Read a NIfTI-1 volume (single-file ``n+1`` or ``ni1`` header/data pair).

    Both byte orders are detected from the header length field.  Supported
    datatypes: uint8, int16, int32, float32, float64.  When ``scl_slope`` is
    nonzero the affine scaling is applied and data are returned as float64.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HDR_SIZE:
        raise MalformedHeader(f"{path}: file shorter than a NIfTI-1 header")
    for order in ("<", ">"):
        if struct.unpack(order + "i", raw[:4])[0] == _HDR_SIZE:
            break
    else:
        raise MalformedHeader(f"{path}: header length field is not {_HDR_SIZE}")
    h = _parse_header(raw[:_HDR_SIZE], order)

    magic = h["magic"]
    if magic == _MAGIC_SINGLE:
        if h["vox_offset"] < _HDR_SIZE + 4:
            raise MalformedHeader(f"{path}: vox_offset {h['vox_offset']} below minimum 352")
        payload = raw[int(h["vox_offset"]):]
    elif magic == _MAGIC_PAIR:
        img = path.with_suffix(".img")
        if not img.exists():
            raise MalformedHeader(f"{path}: paired data file {img} not found")
        payload = img.read_bytes()[int(max(h["vox_offset"], 0)):]
    else:
        raise MalformedHeader(f"{path}: bad magic {magic!r}")

    code = h["datatype"]
    if code not in _DTYPES:
        raise UnsupportedDatatype(f"{path}: datatype code {code} not supported")
    dt = _DTYPES[code].newbyteorder(order)

    dim = h["dim"]
    ndim = dim[0]
    if ndim not in (3, 4):
        raise MalformedHeader(f"{path}: dim[0]={ndim}, only 3-D and 4-D volumes supported")
    nx, ny, nz = (int(dim[i]) for i in (1, 2, 3))
    nt = int(dim[4]) if ndim == 4 else 1
    if min(nx, ny, nz, nt) <= 0:
        raise MalformedHeader(f"{path}: non-positive dimension in {dim[1:5]}")
    n_values = nx * ny * nz * nt
    if len(payload) < n_values * dt.itemsize:
        raise TruncatedData(
            f"{path}: payload holds {len(payload)} bytes, dims imply {n_values * dt.itemsize}"
        )
    values = np.frombuffer(payload, dtype=dt, count=n_values).astype(np.float64)
    slope, inter = h["scl_slope"], h["scl_inter"]
    if slope != 0.0 and not (slope == 1.0 and inter == 0.0):
        values = values * float(slope) + float(inter)

    pixdim = h["pixdim"]
    meta = NiftiMeta(
        data_type=_strip(h["data_type"]),
        db_name=_strip(h["db_name"]),
        extents=h["extents"],
        session_error=h["session_error"],
        regular=h["regular"],
        dim_info=h["dim_info"],
        intent_p=tuple(h["intent_p"]),
        intent_code=h["intent_code"],
        slice_start=h["slice_start"],
        pixdim0=pixdim[0],
        pixdim_t=pixdim[4],
        pixdim_rest=tuple(pixdim[5:8]),
        slice_end=h["slice_end"],
        slice_code=h["slice_code"],
        xyzt_units=h["xyzt_units"],
        cal_max=h["cal_max"],
        cal_min=h["cal_min"],
        slice_duration=h["slice_duration"],
        toffset=h["toffset"],
        glmax=h["glmax"],
        glmin=h["glmin"],
        descrip=_strip(h["descrip"]),
        aux_file=_strip(h["aux_file"]),
        qform_code=h["qform_code"],
        sform_code=h["sform_code"],
        quatern=tuple(h["quatern"]),
        qoffset=tuple(h["qoffset"]),
        srow_x=tuple(h["srow_x"]),
        srow_y=tuple(h["srow_y"]),
        srow_z=tuple(h["srow_z"]),
        intent_name=_strip(h["intent_name"]),
    )
    voxel = tuple(float(pixdim[i]) for i in (1, 2, 3))
    if nt > 1:
        return Volume4((nx, ny, nz), voxel, nt, values, meta=meta)
    return Volume3((nx, ny, nz), voxel, values, meta=meta)


def _encode(data: np.ndarray, dtype_name: str) -> bytes:
    target = _DTYPES[_DTYPE_CODES[dtype_name]]
    flat = np.ascontiguousarray(data.ravel(order="F"), dtype=np.float64)
    cast = flat.astype(target)
    # No silent quantization: the written values must read back bit-equal.
    if not np.array_equal(cast.astype(np.float64), flat):
        raise RequiresScaling(
            f"data is not exactly representable as {dtype_name}; "
            "write float64 or rescale explicitly"
        )
    return cast.tobytes()


def write_nifti(v: Volume3 | Volume4, path, datatype: str = "float64") -> None:
    """Write a single-file NIfTI-1 volume in native byte order.

    The header is 348 bytes plus a 4-byte pad (vox_offset 352, scl_slope 1,
    scl_inter 0).  ``datatype`` is one of ``SUPPORTED_DATATYPES``; writing
    values that the target type cannot represent exactly raises
    RequiresScaling rather than quantizing.
    """
    if datatype not in _DTYPE_CODES:
        raise UnsupportedDatatype(f"datatype {datatype!r} not in {SUPPORTED_DATATYPES}")
    is4d = isinstance(v, Volume4)
    nt = v.nt if is4d else 1
    nx, ny, nz = v.dims
    m = v.meta or NiftiMeta()
    code = _DTYPE_CODES[datatype]
    bitpix = _DTYPES[code].itemsize * 8
    dim = (4 if is4d else 3, nx, ny, nz, nt, 1, 1, 1)
    pixdim = (m.pixdim0, *(float(d) for d in v.voxel_size_mm), m.pixdim_t, *m.pixdim_rest)
    header = struct.pack(
        "<" + _HDR_FMT,
        _HDR_SIZE,
        m.data_type,
        m.db_name,
        m.extents,
        m.session_error,
        m.regular,
        m.dim_info,
        *dim,
        *m.intent_p,
        m.intent_code,
        code,
        bitpix,
        m.slice_start,
        *pixdim,
        352.0,
        1.0,
        0.0,
        m.slice_end,
        m.slice_code,
        m.xyzt_units,
        m.cal_max,
        m.cal_min,
        m.slice_duration,
        m.toffset,
        m.glmax,
        m.glmin,
        m.descrip,
        m.aux_file,
        m.qform_code,
        m.sform_code,
        *m.quatern,
        *m.qoffset,
        *m.srow_x,
        *m.srow_y,
        *m.srow_z,
        m.intent_name,
        _MAGIC_SINGLE,
    )
    payload = _encode(v.data, datatype)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(b"\x00" * 4)
        fh.write(payload)
