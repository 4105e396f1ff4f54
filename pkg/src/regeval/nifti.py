"""NIfTI-1 binary I/O.

Reads and writes single-file NIfTI-1 volumes (``.nii`` / ``.nii.gz``): a
348-byte header, a 4-byte extension flag, then the data section addressed by
``vox_offset``. Both endiannesses are accepted on read (``dim[0]`` in [1, 7]
disambiguates); files are always written little-endian. NIfTI-2 and two-file
``.hdr``/``.img`` pairs are rejected with a clear error.

Affine precedence on read: the s-form is used when ``sform_code > 0``, else
the q-form when ``qform_code > 0``, else a spacing-diagonal fallback. The
choice is recorded in ``header.affine_source``.

Displacement fields use the de facto dense-field convention of established
registration tools: a 5D vector volume with ``dim = (5, nx, ny, nz, 1, 3)``
and intent code 1007, one scalar sub-volume per component. On disk the
vectors are world-millimetre displacements; in memory they are fixed-grid
voxel units (converted through the grid affine at the I/O boundary).
"""
from __future__ import annotations

import gzip
import io
import logging
from pathlib import Path

import numpy as np

from .errors import (
    LabelIntegrityError,
    NiftiCorruptionError,
    NiftiFormatError,
    NonFiniteDataError,
    TransformIntegrityError,
)
from .volume import LabelVolume, Volume, VolumeHeader, header_from_affine

logger = logging.getLogger(__name__)

HEADER_SIZE = 348
VOX_OFFSET = 352  # header + 4-byte extension flag
INTENT_VECTOR = 1007

# Flat header layout; field offsets follow the NIfTI-1 C definition.
_HEADER_FIELDS = [
    ("sizeof_hdr", "i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "i4"),
    ("session_error", "i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "i2", (8,)),
    ("intent_p1", "f4"),
    ("intent_p2", "f4"),
    ("intent_p3", "f4"),
    ("intent_code", "i2"),
    ("datatype", "i2"),
    ("bitpix", "i2"),
    ("slice_start", "i2"),
    ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"),
    ("scl_slope", "f4"),
    ("scl_inter", "f4"),
    ("slice_end", "i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "f4"),
    ("cal_min", "f4"),
    ("slice_duration", "f4"),
    ("toffset", "f4"),
    ("glmax", "i4"),
    ("glmin", "i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "i2"),
    ("sform_code", "i2"),
    ("quatern_b", "f4"),
    ("quatern_c", "f4"),
    ("quatern_d", "f4"),
    ("qoffset_x", "f4"),
    ("qoffset_y", "f4"),
    ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)),
    ("srow_y", "f4", (4,)),
    ("srow_z", "f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
]

_HDR_LE = np.dtype([(f[0], "<" + f[1], *f[2:]) for f in _HEADER_FIELDS])
_HDR_BE = np.dtype([(f[0], ">" + f[1], *f[2:]) for f in _HEADER_FIELDS])
assert _HDR_LE.itemsize == HEADER_SIZE

# NIfTI datatype code <-> numpy dtype (integer and float scalar types only)
_DTYPE_BY_CODE = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
    1024: np.int64,
    1280: np.uint64,
}
_CODE_BY_DTYPE = {np.dtype(v): k for k, v in _DTYPE_BY_CODE.items()}


def _open_for_read(path):
    f = open(path, "rb")
    head = f.read(2)
    f.seek(0)
    if head == b"\x1f\x8b":
        return gzip.GzipFile(fileobj=f)
    return f


def _parse_header(raw: bytes, path):
    if len(raw) < HEADER_SIZE:
        raise NiftiCorruptionError(f"{path}: file shorter than the 348-byte header")
    for dt in (_HDR_LE, _HDR_BE):
        hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=dt)[0]
        if int(hdr["sizeof_hdr"]) == 348 and 1 <= int(hdr["dim"][0]) <= 7:
            return hdr, dt
    size_le = np.frombuffer(raw[:4], dtype="<i4")[0]
    size_be = np.frombuffer(raw[:4], dtype=">i4")[0]
    if 540 in (size_le, size_be):
        raise NiftiFormatError(f"{path}: NIfTI-2 is not supported (NIfTI-1 only)")
    raise NiftiFormatError(f"{path}: not a NIfTI-1 file (sizeof_hdr/dim check failed)")


def _check_magic(hdr, path):
    magic = bytes(hdr["magic"]).rstrip(b"\x00")
    if magic == b"ni1":
        raise NiftiFormatError(f"{path}: two-file .hdr/.img NIfTI-1 is not supported")
    if magic != b"n+1":
        raise NiftiFormatError(f"{path}: bad magic {magic!r}, expected b'n+1'")


def _quaternion_affine(hdr) -> np.ndarray:
    b = float(hdr["quatern_b"])
    c = float(hdr["quatern_c"])
    d = float(hdr["quatern_d"])
    a = max(0.0, 1.0 - b * b - c * c - d * d) ** 0.5
    r = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
    ])
    pixdim = np.asarray(hdr["pixdim"], dtype=np.float64)
    qfac = -1.0 if pixdim[0] == -1.0 else 1.0
    scale = np.array([pixdim[1], pixdim[2], pixdim[3] * qfac])
    m = np.eye(4)
    m[:3, :3] = r * scale
    m[:3, 3] = [float(hdr["qoffset_x"]), float(hdr["qoffset_y"]), float(hdr["qoffset_z"])]
    return m


def _affine_from_header(hdr):
    if int(hdr["sform_code"]) > 0:
        m = np.eye(4)
        m[0] = np.asarray(hdr["srow_x"], dtype=np.float64)
        m[1] = np.asarray(hdr["srow_y"], dtype=np.float64)
        m[2] = np.asarray(hdr["srow_z"], dtype=np.float64)
        return m, "sform"
    if int(hdr["qform_code"]) > 0:
        return _quaternion_affine(hdr), "qform"
    pixdim = np.asarray(hdr["pixdim"], dtype=np.float64)
    m = np.diag([pixdim[1], pixdim[2], pixdim[3], 1.0])
    return m, "pixdim"


def _read_data_section(stream, hdr, dt_order, shape, path):
    code = int(hdr["datatype"])
    if code not in _DTYPE_BY_CODE:
        raise NiftiFormatError(f"{path}: unsupported datatype code {code}")
    dtype = np.dtype(_DTYPE_BY_CODE[code]).newbyteorder(
        "<" if dt_order is _HDR_LE else ">"
    )
    offset = int(hdr["vox_offset"])
    if offset < HEADER_SIZE:
        raise NiftiCorruptionError(f"{path}: vox_offset {offset} inside the header")
    stream.seek(offset)
    n = int(np.prod(shape))
    raw = stream.read(n * dtype.itemsize)
    if len(raw) < n * dtype.itemsize:
        raise NiftiCorruptionError(
            f"{path}: data section truncated ({len(raw)} of {n * dtype.itemsize} bytes)"
        )
    arr = np.frombuffer(raw, dtype=dtype).reshape(shape, order="F")
    return np.ascontiguousarray(arr.astype(dtype.newbyteorder("=")))


def _apply_scaling(data, hdr):
    slope = float(hdr["scl_slope"])
    inter = float(hdr["scl_inter"])
    if not np.isfinite(slope) or not np.isfinite(inter):
        return data, False
    if slope in (0.0, 1.0) and inter == 0.0:
        return data, False
    if slope == 0.0:
        slope = 1.0
    out_dtype = np.float32 if data.dtype == np.float32 else np.float64
    return (data.astype(np.float64) * slope + inter).astype(out_dtype), True


def _build_header(hdr, dims, affine, source) -> VolumeHeader:
    pixdim = np.asarray(hdr["pixdim"], dtype=np.float64)
    if np.all(pixdim[1:4] > 0):
        spacing = tuple(float(s) for s in pixdim[1:4])
    else:
        spacing = tuple(float(np.linalg.norm(affine[:3, j])) for j in range(3))
    intent = bytes(hdr["descrip"]).split(b"\x00", 1)[0].decode("latin-1")
    return VolumeHeader(
        dims=dims,
        spacing=spacing,
        voxel_to_world=affine,
        datatype_code=int(hdr["datatype"]),
        intent=intent,
        affine_source=source,
    )


def read_volume(path, kind: str = "scalar", allow_nonfinite: bool = False):
    """Read a 3D NIfTI-1 volume.

    ``kind`` selects the return type: ``"scalar"`` gives a :class:`Volume`,
    ``"label"`` a :class:`LabelVolume` (validating that every value is an
    integer to within 1e-6). Non-finite voxels raise unless
    ``allow_nonfinite`` is set, in which case they are zeroed and counted.
    """
    if kind not in ("scalar", "label"):
        raise ValueError(f"kind must be 'scalar' or 'label', got {kind!r}")
    path = Path(path)
    with _open_for_read(path) as stream:
        raw = stream.read(HEADER_SIZE)
        hdr, dt = _parse_header(raw, path)
        _check_magic(hdr, path)
        ndim = int(hdr["dim"][0])
        full = [int(d) for d in hdr["dim"][1 : 1 + ndim]]
        if any(d > 1 for d in full[3:]):
            raise NiftiFormatError(
                f"{path}: {ndim}D volume with non-trivial trailing dims {full[3:]}"
            )
        dims = tuple(full[:3] + [1] * (3 - len(full[:3])))
        data = _read_data_section(stream, hdr, dt, dims, path)

    data, scaled = _apply_scaling(data, hdr)
    if np.issubdtype(data.dtype, np.floating):
        finite = np.isfinite(data)
        if not finite.all():
            n_bad = int(data.size - np.count_nonzero(finite))
            if not allow_nonfinite:
                raise NonFiniteDataError(
                    f"{path}: {n_bad} non-finite voxels (pass allow_nonfinite to zero them)"
                )
            logger.warning("%s: zeroed %d non-finite voxels", path, n_bad)
            data = np.where(finite, data, 0.0).astype(data.dtype)

    affine, source = _affine_from_header(hdr)
    if scaled:
        source += "+scaled"
    header = _build_header(hdr, dims, affine, source)

    if kind == "label":
        if np.issubdtype(data.dtype, np.integer):
            labels = data
        else:
            rounded = np.rint(data)
            if not np.all(np.abs(data - rounded) <= 1e-6):
                worst = float(np.max(np.abs(data - rounded)))
                raise LabelIntegrityError(
                    f"{path}: labelmap has non-integer values (max deviation {worst:.3g})"
                )
            labels = rounded.astype(np.int32)
        labels.flags.writeable = False
        return LabelVolume(header=header, labels=labels)

    data.flags.writeable = False
    return Volume(header=header, data=data)


def _new_raw_header() -> np.ndarray:
    hdr = np.zeros((), dtype=_HDR_LE)
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["regular"] = b"r"
    hdr["magic"] = b"n+1"
    hdr["vox_offset"] = VOX_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = 2  # millimetres
    return hdr


def _fill_geometry(hdr, header: VolumeHeader):
    hdr["pixdim"][0] = 1.0
    for j in range(3):
        hdr["pixdim"][1 + j] = header.spacing[j]
    hdr["sform_code"] = 2  # aligned
    hdr["qform_code"] = 0
    m = header.voxel_to_world
    hdr["srow_x"] = m[0]
    hdr["srow_y"] = m[1]
    hdr["srow_z"] = m[2]
    hdr["descrip"] = header.intent.encode("latin-1", "replace")[:79]


def _write_stream(path, payload: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.name.endswith(".gz"):
        with open(path, "wb") as f:
            # mtime=0 keeps outputs byte-identical across runs
            with gzip.GzipFile(filename="", fileobj=f, mode="wb", mtime=0) as gz:
                gz.write(payload)
    else:
        with open(path, "wb") as f:
            f.write(payload)


def write_volume(v: Volume | LabelVolume, path) -> None:
    """Write a volume as little-endian single-file NIfTI-1.

    Data round-trips bit-exactly; the header round-trips semantically (dims,
    spacing, affine to 1e-6). NaN/Inf voxels are rejected before writing.
    """
    if isinstance(v, LabelVolume):
        data = v.labels
    else:
        data = v.data
        v.validate_finite()
    dtype = np.dtype(data.dtype).newbyteorder("<")
    base = np.dtype(data.dtype).newbyteorder("=")
    if base not in _CODE_BY_DTYPE:
        raise NiftiFormatError(f"cannot write dtype {data.dtype}")

    hdr = _new_raw_header()
    hdr["dim"][0] = 3
    hdr["dim"][1:4] = v.header.dims
    hdr["dim"][4:] = 1
    hdr["datatype"] = _CODE_BY_DTYPE[base]
    hdr["bitpix"] = base.itemsize * 8
    _fill_geometry(hdr, v.header)

    buf = io.BytesIO()
    buf.write(hdr.tobytes())
    buf.write(b"\x00\x00\x00\x00")
    buf.write(np.asarray(data, dtype=dtype).tobytes(order="F"))
    _write_stream(path, buf.getvalue())


def read_displacement_field(path):
    """Read a dense displacement field; returns vectors in voxel units."""
    from .geometry import DisplacementField

    path = Path(path)
    with _open_for_read(path) as stream:
        raw = stream.read(HEADER_SIZE)
        hdr, dt = _parse_header(raw, path)
        _check_magic(hdr, path)
        ndim = int(hdr["dim"][0])
        full = [int(d) for d in hdr["dim"][1 : 1 + ndim]]
        if ndim == 5 and full[3] == 1 and full[4] == 3:
            shape = tuple(full[:3]) + (1, 3)
        elif ndim == 4 and full[3] == 3:  # some tools drop the singleton axis
            shape = tuple(full[:3]) + (3,)
        else:
            raise NiftiFormatError(
                f"{path}: not a 3-component vector field (dim={full})"
            )
        data = _read_data_section(stream, hdr, dt, shape, path)

    data = data.reshape(shape[:3] + (3,)).astype(np.float64)
    affine, source = _affine_from_header(hdr)
    header = _build_header(hdr, shape[:3], affine, source)
    if not np.all(np.isfinite(data)):
        raise TransformIntegrityError(f"{path}: displacement field has non-finite values")
    # world-mm on disk -> voxel units in memory
    inv3 = np.linalg.inv(header.voxel_to_world[:3, :3])
    vectors = data @ inv3.T
    return DisplacementField(grid=header, vectors=vectors)


def write_displacement_field(field, path) -> None:
    """Write a displacement field as a 5D vector NIfTI (world-mm components)."""
    vectors = np.asarray(field.vectors, dtype=np.float64)
    if not np.all(np.isfinite(vectors)):
        raise TransformIntegrityError("displacement field has non-finite values")
    world = vectors @ field.grid.voxel_to_world[:3, :3].T

    hdr = _new_raw_header()
    hdr["dim"][0] = 5
    hdr["dim"][1:4] = field.grid.dims
    hdr["dim"][4] = 1
    hdr["dim"][5] = 3
    hdr["dim"][6:] = 1
    hdr["intent_code"] = INTENT_VECTOR
    hdr["datatype"] = _CODE_BY_DTYPE[np.dtype(np.float64)]
    hdr["bitpix"] = 64
    _fill_geometry(hdr, field.grid)

    buf = io.BytesIO()
    buf.write(hdr.tobytes())
    buf.write(b"\x00\x00\x00\x00")
    payload = world.reshape(field.grid.dims + (1, 3))
    buf.write(payload.astype("<f8").tobytes(order="F"))
    _write_stream(path, buf.getvalue())
