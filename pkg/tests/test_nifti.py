"""NIfTI-1 reader/writer: golden headers, round trips, corruption handling."""

import gzip

import numpy as np
import pytest

from conftest import build_nifti_corpus, hand_nifti_bytes
from regeval.errors import (
    LabelIntegrityError,
    NiftiCorruptionError,
    NiftiFormatError,
    NonFiniteDataError,
    TransformIntegrityError,
)
from regeval.geometry import DisplacementField
from regeval.nifti import (
    read_displacement_field,
    read_volume,
    write_displacement_field,
    write_volume,
)
from regeval.volume import LabelVolume, Volume, VolumeHeader


def _rng(seed=0):
    return np.random.Generator(np.random.Philox(seed))


class TestHandBuiltHeaders:
    """Reader checked against a second, struct-based serializer."""

    def test_little_endian_sform(self, tmp_path):
        data = _rng(1).normal(size=(3, 4, 5)).astype(np.float32)
        affine = np.array([[0.0, -1.5, 0.0, 10.0],
                           [2.0, 0.0, 0.0, -7.0],
                           [0.0, 0.0, 1.0, 3.0],
                           [0.0, 0.0, 0.0, 1.0]])
        path = tmp_path / "le.nii"
        path.write_bytes(hand_nifti_bytes(data, endian="<",
                                          pixdim=(2.0, 1.5, 1.0),
                                          sform=affine))
        v = read_volume(path)
        assert v.header.dims == (3, 4, 5)
        assert v.header.spacing == (2.0, 1.5, 1.0)
        assert v.header.affine_source == "sform"
        np.testing.assert_allclose(v.header.voxel_to_world, affine, atol=1e-6)
        np.testing.assert_array_equal(v.data, data)

    def test_big_endian_sform(self, tmp_path):
        data = _rng(2).normal(size=(4, 3, 6)).astype(np.float64)
        affine = np.eye(4)
        affine[:3, 3] = [1.0, 2.0, -3.0]
        path = tmp_path / "be.nii"
        path.write_bytes(hand_nifti_bytes(data, endian=">", sform=affine))
        v = read_volume(path)
        assert v.header.dims == (4, 3, 6)
        np.testing.assert_allclose(v.header.voxel_to_world, affine, atol=1e-6)
        np.testing.assert_array_equal(v.data, data)
        assert v.data.dtype == np.float64
        assert v.data.dtype.byteorder in ("=", "<")  # native after read

    def test_qform_identity_quaternion(self, tmp_path):
        data = _rng(3).normal(size=(5, 5, 5)).astype(np.float32)
        path = tmp_path / "q.nii"
        path.write_bytes(hand_nifti_bytes(
            data, pixdim=(1.0, 2.0, 3.0),
            qform={"b": 0.0, "c": 0.0, "d": 0.0,
                   "offset": (-4.0, 5.0, 6.0), "qfac": 1.0}))
        v = read_volume(path)
        assert v.header.affine_source == "qform"
        expected = np.diag([1.0, 2.0, 3.0, 1.0])
        expected[:3, 3] = [-4.0, 5.0, 6.0]
        np.testing.assert_allclose(v.header.voxel_to_world, expected, atol=1e-6)

    def test_qform_half_turn_about_z(self, tmp_path):
        # quaternion (a=0, b=0, c=0, d=1) rotates x->-x, y->-y
        data = _rng(4).normal(size=(4, 4, 4)).astype(np.float32)
        path = tmp_path / "qrot.nii"
        path.write_bytes(hand_nifti_bytes(
            data, qform={"b": 0.0, "c": 0.0, "d": 1.0,
                         "offset": (0.0, 0.0, 0.0), "qfac": 1.0}))
        v = read_volume(path)
        expected = np.diag([-1.0, -1.0, 1.0, 1.0])
        np.testing.assert_allclose(v.header.voxel_to_world, expected, atol=1e-6)

    def test_qform_negative_qfac_flips_third_axis(self, tmp_path):
        data = _rng(5).normal(size=(4, 4, 4)).astype(np.float32)
        path = tmp_path / "qfac.nii"
        path.write_bytes(hand_nifti_bytes(
            data, pixdim=(1.0, 1.0, 2.0),
            qform={"b": 0.0, "c": 0.0, "d": 0.0,
                   "offset": (0.0, 0.0, 0.0), "qfac": -1.0}))
        v = read_volume(path)
        np.testing.assert_allclose(v.header.voxel_to_world,
                                   np.diag([1.0, 1.0, -2.0, 1.0]), atol=1e-6)

    def test_pixdim_fallback_when_both_codes_zero(self, tmp_path):
        data = _rng(6).normal(size=(3, 3, 3)).astype(np.float32)
        path = tmp_path / "p.nii"
        path.write_bytes(hand_nifti_bytes(data, pixdim=(0.6, 0.6, 0.6)))
        v = read_volume(path)
        assert v.header.affine_source == "pixdim"
        np.testing.assert_allclose(
            v.header.voxel_to_world, np.diag([0.6, 0.6, 0.6, 1.0]),
            atol=1e-6)

    def test_sform_wins_over_qform(self, tmp_path):
        data = _rng(7).normal(size=(3, 3, 3)).astype(np.float32)
        sform = np.eye(4)
        sform[:3, 3] = [9.0, 9.0, 9.0]
        path = tmp_path / "sq.nii"
        path.write_bytes(hand_nifti_bytes(
            data, sform=sform,
            qform={"b": 0.0, "c": 0.0, "d": 0.0,
                   "offset": (1.0, 1.0, 1.0), "qfac": 1.0}))
        v = read_volume(path)
        assert v.header.affine_source == "sform"
        np.testing.assert_allclose(v.header.voxel_to_world[:3, 3],
                                   [9.0, 9.0, 9.0], atol=1e-6)

    def test_fortran_order_on_disk(self, tmp_path):
        # first axis varies fastest in the byte stream
        data = np.arange(8, dtype=np.int16).reshape(2, 2, 2)
        path = tmp_path / "f.nii"
        path.write_bytes(hand_nifti_bytes(data))
        raw = path.read_bytes()[352:]
        stored = np.frombuffer(raw, dtype="<i2")
        np.testing.assert_array_equal(stored, data.reshape(-1, order="F"))
        v = read_volume(path)
        np.testing.assert_array_equal(v.data, data)

    def test_intensity_scaling_applied_and_tagged(self, tmp_path):
        data = np.array([[[1, 2], [3, 4]], [[5, 6], [7, 8]]], dtype=np.int16)
        path = tmp_path / "scl.nii"
        path.write_bytes(hand_nifti_bytes(data, scl=(2.0, 10.0)))
        v = read_volume(path)
        np.testing.assert_allclose(v.data, data * 2.0 + 10.0)
        assert v.header.affine_source == "pixdim+scaled"

    def test_zero_slope_keeps_raw_values(self, tmp_path):
        data = np.array([[[1, 2], [3, 4]], [[5, 6], [7, 8]]], dtype=np.int16)
        path = tmp_path / "scl0.nii"
        path.write_bytes(hand_nifti_bytes(data, scl=(0.0, 0.0)))
        v = read_volume(path)
        np.testing.assert_array_equal(v.data, data)
        assert "+scaled" not in v.header.affine_source

    def test_gzip_container(self, tmp_path):
        data = _rng(8).normal(size=(3, 4, 5)).astype(np.float32)
        raw = hand_nifti_bytes(data)
        path = tmp_path / "z.nii.gz"
        with open(path, "wb") as f:
            with gzip.GzipFile(fileobj=f, mode="wb") as zf:
                zf.write(raw)
        v = read_volume(path)
        np.testing.assert_array_equal(v.data, data)


class TestMalformedFiles:
    def _ok_bytes(self):
        return hand_nifti_bytes(np.zeros((2, 2, 2), dtype=np.float32))

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "t.nii"
        path.write_bytes(self._ok_bytes()[:100])
        with pytest.raises(NiftiCorruptionError):
            read_volume(path)

    def test_truncated_data_section(self, tmp_path):
        path = tmp_path / "t.nii"
        path.write_bytes(self._ok_bytes()[:-8])
        with pytest.raises(NiftiCorruptionError):
            read_volume(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.nii"
        path.write_bytes(hand_nifti_bytes(np.zeros((2, 2, 2), np.float32),
                                          magic=b"bad\x00"))
        with pytest.raises(NiftiFormatError):
            read_volume(path)

    def test_two_file_magic_rejected(self, tmp_path):
        path = tmp_path / "ni1.nii"
        path.write_bytes(hand_nifti_bytes(np.zeros((2, 2, 2), np.float32),
                                          magic=b"ni1\x00"))
        with pytest.raises(NiftiFormatError):
            read_volume(path)

    def test_nifti2_rejected_with_specific_message(self, tmp_path):
        path = tmp_path / "v2.nii"
        path.write_bytes(hand_nifti_bytes(np.zeros((2, 2, 2), np.float32),
                                          sizeof_hdr=540))
        with pytest.raises(NiftiFormatError, match="NIfTI-2"):
            read_volume(path)

    def test_garbage_rejected(self, tmp_path):
        path = tmp_path / "g.nii"
        path.write_bytes(b"\x00" * 400)
        with pytest.raises(NiftiFormatError):
            read_volume(path)

    def test_unsupported_datatype_code(self, tmp_path):
        path = tmp_path / "rgb.nii"
        path.write_bytes(hand_nifti_bytes(np.zeros((2, 2, 2), np.float32),
                                          datatype_override=128))
        with pytest.raises(NiftiFormatError):
            read_volume(path)

    def test_vox_offset_inside_header(self, tmp_path):
        path = tmp_path / "off.nii"
        path.write_bytes(hand_nifti_bytes(np.zeros((2, 2, 2), np.float32),
                                          vox_offset=100.0))
        with pytest.raises(NiftiCorruptionError):
            read_volume(path)

    def test_4d_with_multiple_timepoints_rejected(self, tmp_path):
        data = np.zeros((2, 2, 2, 2), dtype=np.float32)
        path = tmp_path / "4d.nii"
        path.write_bytes(hand_nifti_bytes(
            data, dim_override=(4, 2, 2, 2, 2, 1, 1, 1)))
        with pytest.raises(NiftiFormatError):
            read_volume(path)

    def test_nan_voxels_raise_by_default(self, tmp_path):
        data = np.zeros((2, 2, 2), dtype=np.float32)
        data[0, 0, 0] = np.nan
        path = tmp_path / "nan.nii"
        path.write_bytes(hand_nifti_bytes(data))
        with pytest.raises(NonFiniteDataError):
            read_volume(path)

    def test_nan_voxels_zeroed_when_allowed(self, tmp_path):
        data = np.full((2, 2, 2), 5.0, dtype=np.float32)
        data[0, 0, 0] = np.inf
        path = tmp_path / "inf.nii"
        path.write_bytes(hand_nifti_bytes(data))
        v = read_volume(path, allow_nonfinite=True)
        assert v.data[0, 0, 0] == 0.0
        assert v.data[1, 1, 1] == 5.0

    def test_non_integer_labelmap_rejected(self, tmp_path):
        data = np.full((2, 2, 2), 1.5, dtype=np.float32)
        path = tmp_path / "lab.nii"
        path.write_bytes(hand_nifti_bytes(data))
        with pytest.raises(LabelIntegrityError):
            read_volume(path, kind="label")

    def test_integral_float_labelmap_converted(self, tmp_path):
        data = np.array([[[0, 1], [2, 0]], [[3, 0], [0, 1]]],
                        dtype=np.float32)
        path = tmp_path / "lab.nii"
        path.write_bytes(hand_nifti_bytes(data))
        lv = read_volume(path, kind="label")
        assert isinstance(lv, LabelVolume)
        assert lv.labels.dtype == np.int32
        assert lv.label_set == (1, 2, 3)


class TestWriteReadRoundTrip:
    @pytest.mark.parametrize("dtype", [np.uint8, np.int16, np.int32,
                                       np.float32, np.float64])
    @pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
    def test_data_round_trips_bitwise(self, tmp_path, dtype, suffix):
        rng = _rng(11)
        dims = (4, 5, 3)
        if np.issubdtype(dtype, np.integer):
            data = rng.integers(0, 100, size=dims).astype(dtype)
        else:
            data = rng.normal(size=dims).astype(dtype)
        affine = np.eye(4)
        affine[:3, :3] = np.diag([0.5, 1.0, 2.0])
        affine[:3, 3] = [-3.0, 4.0, 5.0]
        header = VolumeHeader(dims=dims, spacing=(0.5, 1.0, 2.0),
                              voxel_to_world=affine, intent="roundtrip")
        path = tmp_path / f"rt{suffix}"
        write_volume(Volume(header=header, data=data), path)
        v = read_volume(path)
        assert v.data.dtype == np.dtype(dtype)
        np.testing.assert_array_equal(v.data, data)
        np.testing.assert_allclose(v.header.voxel_to_world, affine, atol=1e-6)
        assert v.header.spacing == (0.5, 1.0, 2.0)
        assert v.header.intent == "roundtrip"

    def test_rewrite_is_byte_identical(self, tmp_path):
        data = _rng(12).normal(size=(5, 5, 5)).astype(np.float32)
        header = VolumeHeader(dims=(5, 5, 5), spacing=(1.0, 1.0, 1.0),
                              voxel_to_world=np.eye(4))
        v = Volume(header=header, data=data)
        a, b = tmp_path / "a.nii.gz", tmp_path / "b.nii.gz"
        write_volume(v, a)
        write_volume(read_volume(a), b)
        assert a.read_bytes() == b.read_bytes()

    def test_label_round_trip_preserves_label_set(self, tmp_path):
        labels = np.zeros((4, 4, 4), dtype=np.int32)
        labels[1, 1, 1] = 10
        labels[2, 2, 2] = 42
        header = VolumeHeader(dims=(4, 4, 4), spacing=(1.0, 1.0, 1.0),
                              voxel_to_world=np.eye(4))
        path = tmp_path / "lab.nii.gz"
        write_volume(LabelVolume(header=header, labels=labels), path)
        lv = read_volume(path, kind="label")
        assert lv.label_set == (10, 42)
        np.testing.assert_array_equal(lv.labels, labels)

    def test_nan_rejected_on_write(self, tmp_path):
        data = np.zeros((2, 2, 2))
        data[0, 0, 0] = np.nan
        header = VolumeHeader(dims=(2, 2, 2), spacing=(1.0, 1.0, 1.0),
                              voxel_to_world=np.eye(4))
        with pytest.raises(NonFiniteDataError):
            write_volume(Volume(header=header, data=data), tmp_path / "x.nii")

    def test_corpus_round_trip(self, tmp_path):
        """Every corpus file: read, rewrite, reread; data and grid survive."""
        paths = build_nifti_corpus(tmp_path / "corpus")
        assert len(paths) == 20
        for path in paths:
            v = read_volume(path)
            out = tmp_path / ("rt_" + path.name)
            write_volume(v, out)
            again = read_volume(out)
            assert again.data.dtype == v.data.dtype
            np.testing.assert_array_equal(again.data, v.data)
            np.testing.assert_allclose(again.header.voxel_to_world,
                                       v.header.voxel_to_world, atol=1e-6)
            # rewriting once more must reproduce the same bytes
            out2 = tmp_path / ("rt2_" + path.name)
            write_volume(again, out2)
            assert out2.read_bytes() == out.read_bytes()


class TestDisplacementFieldIO:
    def _grid(self, dims=(4, 5, 3)):
        affine = np.eye(4)
        affine[:3, :3] = np.diag([0.5, 1.0, 2.0])
        affine[:3, 3] = [1.0, -2.0, 3.0]
        return VolumeHeader(dims=dims, spacing=(0.5, 1.0, 2.0),
                            voxel_to_world=affine)

    def test_round_trip_exact_on_power_of_two_spacing(self, tmp_path):
        grid = self._grid()
        vectors = _rng(13).normal(size=grid.dims + (3,))
        field = DisplacementField(grid=grid, vectors=vectors)
        path = tmp_path / "f.nii.gz"
        write_displacement_field(field, path)
        back = read_displacement_field(path)
        np.testing.assert_array_equal(back.vectors, vectors)
        assert back.grid.same_grid(grid)

    def test_disk_layout_is_5d_world_mm_vector(self, tmp_path):
        grid = self._grid(dims=(2, 2, 2))
        vectors = np.zeros((2, 2, 2, 3))
        vectors[0, 0, 0] = [1.0, 0.0, 0.0]  # one voxel along axis 0
        field = DisplacementField(grid=grid, vectors=vectors)
        path = tmp_path / "f.nii"
        write_displacement_field(field, path)
        raw = path.read_bytes()
        dim = np.frombuffer(raw[40:56], dtype="<i2")
        np.testing.assert_array_equal(dim, [5, 2, 2, 2, 1, 3, 1, 1])
        intent_code = np.frombuffer(raw[68:70], dtype="<i2")[0]
        assert intent_code == 1007
        stored = np.frombuffer(raw[352:], dtype="<f8").reshape(
            (2, 2, 2, 1, 3), order="F")
        # voxel step of 1 along axis 0 is 0.5mm in this grid
        np.testing.assert_allclose(stored[0, 0, 0, 0], [0.5, 0.0, 0.0])

    def test_4d_layout_without_singleton_accepted(self, tmp_path):
        # same field, but with the fourth axis dropped as some tools emit
        world = np.zeros((2, 2, 2, 3))
        world[1, 1, 1] = [0.0, 3.0, 0.0]
        path = tmp_path / "f4.nii"
        path.write_bytes(hand_nifti_bytes(
            world.astype(np.float64), dim_override=(4, 2, 2, 2, 3, 1, 1, 1),
            sform=np.eye(4), intent_code=1007))
        field = read_displacement_field(path)
        np.testing.assert_allclose(field.vectors[1, 1, 1], [0.0, 3.0, 0.0])

    def test_wrong_shape_rejected(self, tmp_path):
        data = np.zeros((2, 2, 2), dtype=np.float64)
        path = tmp_path / "s.nii"
        path.write_bytes(hand_nifti_bytes(data))
        with pytest.raises(NiftiFormatError):
            read_displacement_field(path)

    def test_non_finite_vectors_rejected_on_write(self, tmp_path):
        grid = self._grid(dims=(2, 2, 2))
        vectors = np.zeros((2, 2, 2, 3))
        vectors[0, 0, 0, 0] = np.nan
        with pytest.raises(TransformIntegrityError):
            write_displacement_field(
                DisplacementField(grid=grid, vectors=vectors),
                tmp_path / "bad.nii")

    def test_non_finite_vectors_rejected_on_read(self, tmp_path):
        world = np.zeros((2, 2, 2, 1, 3))
        world[0, 0, 0, 0, 0] = np.inf
        path = tmp_path / "inf.nii"
        path.write_bytes(hand_nifti_bytes(
            world, dim_override=(5, 2, 2, 2, 1, 3, 1, 1),
            sform=np.eye(4), intent_code=1007))
        with pytest.raises(TransformIntegrityError):
            read_displacement_field(path)

    def test_world_mm_to_voxel_conversion_uses_grid(self, tmp_path):
        # 2mm on disk along world y = 2 voxels on a 1mm grid rotated so
        # voxel axis 0 points along world y
        affine = np.eye(4)
        affine[:3, :3] = np.array([[0.0, 1.0, 0.0],
                                   [1.0, 0.0, 0.0],
                                   [0.0, 0.0, 1.0]])
        world = np.zeros((2, 2, 2, 1, 3))
        world[:, :, :, 0, 1] = 2.0
        path = tmp_path / "rot.nii"
        path.write_bytes(hand_nifti_bytes(
            world, dim_override=(5, 2, 2, 2, 1, 3, 1, 1),
            sform=affine, intent_code=1007))
        field = read_displacement_field(path)
        np.testing.assert_allclose(field.vectors[..., 0], 2.0, atol=1e-12)
        np.testing.assert_allclose(field.vectors[..., 1], 0.0, atol=1e-12)


def test_gzip_output_is_deterministic(tmp_path):
    data = _rng(14).normal(size=(6, 6, 6)).astype(np.float32)
    header = VolumeHeader(dims=(6, 6, 6), spacing=(1.0, 1.0, 1.0),
                          voxel_to_world=np.eye(4))
    v = Volume(header=header, data=data)
    a, b = tmp_path / "a.nii.gz", tmp_path / "b.nii.gz"
    write_volume(v, a)
    write_volume(v, b)
    assert a.read_bytes() == b.read_bytes()
