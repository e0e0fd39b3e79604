import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fwesim.errors import MalformedHeader, RequiresScaling, TruncatedData, UnsupportedDatatype
from fwesim.volio import (
    SUPPORTED_DATATYPES,
    Mask,
    NiftiMeta,
    Volume3,
    Volume4,
    make_ellipsoid_mask,
    read_nifti,
    write_nifti,
)


def small_volume(dims=(3, 4, 5), seed=0, integral=False):
    rng = np.random.default_rng(seed)
    if integral:
        data = rng.integers(-100, 100, size=dims).astype(np.float64)
    else:
        data = rng.standard_normal(dims).astype(np.float32).astype(np.float64)
    return Volume3(dims, (2.0, 2.0, 2.5), data)


class TestVolumeModel:
    def test_data_length_checked(self):
        with pytest.raises(ValueError):
            Volume3((2, 2, 2), (1, 1, 1), np.zeros(7))

    def test_voxel_sizes_positive(self):
        with pytest.raises(ValueError):
            Volume3((2, 2, 2), (1, 0, 1), np.zeros(8))

    def test_flat_data_is_x_fastest(self):
        flat = np.arange(8.0)
        v = Volume3((2, 2, 2), (1, 1, 1), flat)
        assert v.data[1, 0, 0] == 1.0
        assert v.data[0, 1, 0] == 2.0
        assert v.data[0, 0, 1] == 4.0

    def test_volume4_frames(self):
        frames = [small_volume(seed=i) for i in range(3)]
        v4 = Volume4.from_frames(frames)
        assert v4.nt == 3
        for i, f in enumerate(frames):
            assert np.array_equal(v4.frame(i).data, f.data)


class TestNiftiRoundTrip:
    @pytest.mark.parametrize("datatype", SUPPORTED_DATATYPES)
    def test_write_read_identity(self, tmp_path, datatype):
        integral = datatype in ("uint8", "int16", "int32")
        v = small_volume(integral=integral)
        if datatype == "uint8":
            v = v.with_data(np.abs(v.data))
        path = tmp_path / "v.nii"
        write_nifti(v, path, datatype=datatype)
        back = read_nifti(path)
        assert back.dims == v.dims
        assert back.voxel_size_mm == v.voxel_size_mm
        assert np.array_equal(back.data, v.data)

    @pytest.mark.parametrize("datatype", SUPPORTED_DATATYPES)
    def test_reserialization_is_byte_identical(self, tmp_path, datatype):
        integral = datatype in ("uint8", "int16", "int32")
        v = small_volume(integral=integral)
        if datatype == "uint8":
            v = v.with_data(np.abs(v.data))
        f = tmp_path / "a.nii"
        g = tmp_path / "b.nii"
        write_nifti(v, f, datatype=datatype)
        write_nifti(read_nifti(f), g, datatype=datatype)
        assert f.read_bytes() == g.read_bytes()

    def test_file_size_is_header_plus_payload(self, tmp_path):
        v = Volume3((2, 2, 2), (1, 1, 1), np.zeros(8))
        path = tmp_path / "v.nii"
        write_nifti(v, path, datatype="float32")
        assert path.stat().st_size == 352 + 8 * 4

    def test_volume4_round_trip(self, tmp_path):
        v4 = Volume4.from_frames([small_volume(seed=i) for i in range(4)])
        path = tmp_path / "v4.nii"
        write_nifti(v4, path, datatype="float64")
        back = read_nifti(path)
        assert isinstance(back, Volume4)
        assert back.nt == 4
        assert np.array_equal(back.data, v4.data)

    def test_meta_preserved_verbatim(self, tmp_path):
        meta = NiftiMeta(
            descrip=b"made up elsewhere",
            qform_code=1,
            sform_code=2,
            quatern=(0.1, 0.2, 0.3),
            qoffset=(-90.0, -126.0, -72.0),
            srow_x=(2.0, 0.0, 0.0, -90.0),
            srow_y=(0.0, 2.0, 0.0, -126.0),
            srow_z=(0.0, 0.0, 2.0, -72.0),
            xyzt_units=10,
        )
        v = Volume3((3, 3, 3), (2.0, 2.0, 2.0), np.zeros(27), meta=meta)
        path = tmp_path / "m.nii"
        write_nifti(v, path)
        back = read_nifti(path)
        assert back.meta.descrip == b"made up elsewhere"
        assert back.meta.sform_code == 2
        assert back.meta.srow_y == pytest.approx((0.0, 2.0, 0.0, -126.0))
        second = tmp_path / "m2.nii"
        write_nifti(back, second)
        assert path.read_bytes() == second.read_bytes()

    @settings(max_examples=25, deadline=None)
    @given(
        nx=st.integers(1, 5), ny=st.integers(1, 5), nz=st.integers(1, 5),
        datatype=st.sampled_from(SUPPORTED_DATATYPES), seed=st.integers(0, 2**16),
    )
    def test_round_trip_property(self, tmp_path_factory, nx, ny, nz, datatype, seed):
        rng = np.random.default_rng(seed)
        if datatype in ("uint8", "int16", "int32"):
            data = rng.integers(0, 100, size=nx * ny * nz).astype(np.float64)
        else:
            data = rng.standard_normal(nx * ny * nz).astype(np.float32).astype(np.float64)
        v = Volume3((nx, ny, nz), (1.0, 1.5, 2.0), data)
        path = tmp_path_factory.mktemp("rt") / "v.nii"
        write_nifti(v, path, datatype=datatype)
        back = read_nifti(path)
        assert np.array_equal(back.data, v.data)


def _byteswapped_copy(path, out_path):
    """Rewrite a file produced by write_nifti in the opposite byte order."""
    raw = bytearray(path.read_bytes())
    fmt = "i10s18sihBB8h3f4h8f3fh2B4f2i80s24s2h6f12f16s4s"
    fields = struct.unpack("<" + fmt, bytes(raw[:348]))
    swapped = struct.pack(">" + fmt, *fields)
    dtype_code = fields[19]
    np_dtype = {2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32, 64: np.float64}[dtype_code]
    payload = np.frombuffer(bytes(raw[352:]), dtype=np_dtype).byteswap().tobytes()
    out_path.write_bytes(swapped + bytes(raw[348:352]) + payload)


class TestNiftiEdgeCases:
    def test_byteswapped_file_parses_identically(self, tmp_path):
        v = small_volume()
        le = tmp_path / "le.nii"
        be = tmp_path / "be.nii"
        write_nifti(v, le, datatype="float32")
        _byteswapped_copy(le, be)
        a, b = read_nifti(le), read_nifti(be)
        assert a.dims == b.dims
        assert a.voxel_size_mm == b.voxel_size_mm
        assert np.array_equal(a.data, b.data)

    def test_scl_slope_applied(self, tmp_path):
        v = small_volume(integral=True)
        path = tmp_path / "s.nii"
        write_nifti(v, path, datatype="int16")
        raw = bytearray(path.read_bytes())
        raw[112:116] = struct.pack("<f", 2.5)   # scl_slope
        raw[116:120] = struct.pack("<f", -1.0)  # scl_inter
        scaled = tmp_path / "scaled.nii"
        scaled.write_bytes(bytes(raw))
        back = read_nifti(scaled)
        assert np.allclose(back.data, v.data * 2.5 - 1.0)

    def test_pair_magic_reads_img_file(self, tmp_path):
        v = small_volume()
        single = tmp_path / "single.nii"
        write_nifti(v, single, datatype="float64")
        raw = bytearray(single.read_bytes())
        raw[344:348] = b"ni1\x00"
        raw[108:112] = struct.pack("<f", 0.0)  # vox_offset applies to .img
        (tmp_path / "pair.hdr").write_bytes(bytes(raw[:348]))
        (tmp_path / "pair.img").write_bytes(bytes(raw[352:]))
        back = read_nifti(tmp_path / "pair.hdr")
        assert np.array_equal(back.data, v.data)

    def test_wrong_magic_rejected(self, tmp_path):
        v = small_volume()
        path = tmp_path / "bad.nii"
        write_nifti(v, path)
        raw = bytearray(path.read_bytes())
        raw[344:348] = b"xxx\x00"
        path.write_bytes(bytes(raw))
        with pytest.raises(MalformedHeader):
            read_nifti(path)

    def test_wrong_header_length_rejected(self, tmp_path):
        v = small_volume()
        path = tmp_path / "bad.nii"
        write_nifti(v, path)
        raw = bytearray(path.read_bytes())
        raw[0:4] = struct.pack("<i", 349)
        path.write_bytes(bytes(raw))
        with pytest.raises(MalformedHeader):
            read_nifti(path)

    def test_truncated_payload_rejected(self, tmp_path):
        v = small_volume()
        path = tmp_path / "short.nii"
        write_nifti(v, path, datatype="float64")
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(TruncatedData):
            read_nifti(path)

    def test_unsupported_datatype_rejected(self, tmp_path):
        v = small_volume()
        path = tmp_path / "rgb.nii"
        write_nifti(v, path)
        raw = bytearray(path.read_bytes())
        raw[70:72] = struct.pack("<h", 128)  # RGB24
        path.write_bytes(bytes(raw))
        with pytest.raises(UnsupportedDatatype):
            read_nifti(path)

    def test_int16_of_fractional_data_requires_scaling(self, tmp_path):
        v = Volume3((2, 2, 2), (1, 1, 1), np.full(8, 0.5))
        with pytest.raises(RequiresScaling):
            write_nifti(v, tmp_path / "frac.nii", datatype="int16")

    def test_uint8_of_negative_data_requires_scaling(self, tmp_path):
        v = Volume3((2, 2, 2), (1, 1, 1), np.full(8, -3.0))
        with pytest.raises(RequiresScaling):
            write_nifti(v, tmp_path / "neg.nii", datatype="uint8")

    def test_float32_lossy_cast_requires_scaling(self, tmp_path):
        v = Volume3((2, 2, 2), (1, 1, 1), np.full(8, 1.0 / 3.0))
        with pytest.raises(RequiresScaling):
            write_nifti(v, tmp_path / "lossy.nii", datatype="float32")


class TestEllipsoidMask:
    def test_enclosing_ellipsoid_keeps_all(self):
        m = make_ellipsoid_mask((9, 9, 9), (1, 1, 1), (10, 10, 10))
        assert m.n_inside == 729

    def test_tiny_ellipsoid_keeps_center(self):
        m = make_ellipsoid_mask((9, 9, 9), (1, 1, 1), (0.4, 0.4, 0.4))
        assert m.n_inside == 1
        assert m.inside[4, 4, 4]

    def test_matches_per_voxel_oracle(self):
        dims, voxel, semi = (11, 9, 10), (1.0, 1.0, 1.0), (4.0, 4.0, 4.0)
        m = make_ellipsoid_mask(dims, voxel, semi)
        count = 0
        for x in range(dims[0]):
            for y in range(dims[1]):
                for z in range(dims[2]):
                    cx = (x - (dims[0] - 1) / 2) * voxel[0]
                    cy = (y - (dims[1] - 1) / 2) * voxel[1]
                    cz = (z - (dims[2] - 1) / 2) * voxel[2]
                    inside = (cx / semi[0]) ** 2 + (cy / semi[1]) ** 2 + (cz / semi[2]) ** 2 <= 1
                    count += inside
                    assert m.inside[x, y, z] == inside
        assert m.n_inside == count

    def test_mask_needs_one_voxel(self):
        with pytest.raises(ValueError):
            Mask((2, 2, 2), np.zeros((2, 2, 2), dtype=bool))
