"""Shared test helpers.

``hand_nifti_bytes`` builds NIfTI-1 files with ``struct.pack_into`` at
hard-coded field offsets, independent of the package's own header
machinery, so reader tests check against a second implementation of the
format rather than against themselves.
"""

import struct

import numpy as np


def hand_nifti_bytes(data, *, endian="<", pixdim=(1.0, 1.0, 1.0),
                     sform=None, qform=None, scl=None, magic=b"n+1\x00",
                     vox_offset=352.0, intent_code=0, dim_override=None,
                     datatype_override=None, sizeof_hdr=348):
    """Serialize ``data`` as a single-file NIfTI-1 byte string by hand.

    ``sform`` is a 4x4 affine written to the s-rows (sform_code 2);
    ``qform`` is a dict with keys b, c, d, offset, qfac (qform_code 1).
    With neither, both codes stay 0 and readers must fall back to pixdim.
    """
    codes = {np.dtype(np.uint8): 2, np.dtype(np.int16): 4,
             np.dtype(np.int32): 8, np.dtype(np.float32): 16,
             np.dtype(np.float64): 64, np.dtype(np.int8): 256,
             np.dtype(np.uint16): 512, np.dtype(np.uint32): 768,
             np.dtype(np.int64): 1024, np.dtype(np.uint64): 1280}
    data = np.asarray(data)
    datatype = codes[np.dtype(data.dtype)] if datatype_override is None \
        else datatype_override
    bitpix = data.dtype.itemsize * 8

    hdr = bytearray(348)
    p = lambda fmt, off, *vals: struct.pack_into(endian + fmt, hdr, off, *vals)
    p("i", 0, sizeof_hdr)
    dim = [3, *data.shape, 1, 1, 1, 1][:8] if dim_override is None \
        else list(dim_override)
    p("8h", 40, *dim)
    p("h", 68, intent_code)
    p("h", 70, datatype)
    p("h", 72, bitpix)
    qfac = (qform or {}).get("qfac", 1.0)
    p("8f", 76, qfac, *pixdim, 1.0, 1.0, 1.0, 1.0)
    p("f", 108, vox_offset)
    if scl is not None:
        p("f", 112, scl[0])
        p("f", 116, scl[1])
    if qform is not None:
        p("h", 252, 1)
        p("3f", 256, qform["b"], qform["c"], qform["d"])
        p("3f", 268, *qform["offset"])
    if sform is not None:
        p("h", 254, 2)
        m = np.asarray(sform, dtype=np.float64)
        p("4f", 280, *m[0])
        p("4f", 296, *m[1])
        p("4f", 312, *m[2])
    struct.pack_into("4s", hdr, 344, magic)

    payload = bytes(hdr)
    payload += b"\x00" * (int(vox_offset) - len(payload)) \
        if vox_offset >= 348 else b""
    payload += data.astype(data.dtype.newbyteorder(endian)).tobytes(order="F")
    return payload


def build_nifti_corpus(out_dir, n_files=20, seed=20240301):
    """Write a mixed corpus of synthetic NIfTI files; returns the paths.

    Covers the supported scalar dtypes, plain and gzipped containers, and
    both byte orders (big-endian files are built by the hand serializer,
    everything else through the package writer).
    """
    import gzip

    from regeval.nifti import write_volume
    from regeval.volume import Volume, VolumeHeader

    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.Philox(seed))
    dtypes = [np.uint8, np.int16, np.int32, np.float32, np.float64]
    paths = []
    for i in range(n_files):
        dtype = dtypes[i % len(dtypes)]
        dims = tuple(int(d) for d in rng.integers(4, 9, size=3))
        if np.issubdtype(dtype, np.integer):
            info = np.iinfo(dtype)
            lo, hi = max(info.min, -500), min(info.max, 500)
            data = rng.integers(lo, hi + 1, size=dims).astype(dtype)
        else:
            data = rng.normal(size=dims).astype(dtype)
        affine = np.eye(4)
        affine[:3, :3] = np.diag(rng.uniform(0.5, 2.0, size=3))
        affine[:3, 3] = rng.uniform(-20, 20, size=3)
        spacing = tuple(float(affine[j, j]) for j in range(3))

        big_endian = i % 4 == 3
        gz = i % 2 == 1
        name = f"corpus_{i:02d}.nii" + (".gz" if gz else "")
        path = out_dir / name
        if big_endian:
            raw = hand_nifti_bytes(
                data, endian=">", pixdim=spacing,
                sform=affine.astype(np.float32).astype(np.float64))
            if gz:
                with open(path, "wb") as f:
                    with gzip.GzipFile(filename="", fileobj=f, mode="wb",
                                       mtime=0) as zf:
                        zf.write(raw)
            else:
                path.write_bytes(raw)
        else:
            header = VolumeHeader(dims=dims, spacing=spacing,
                                  voxel_to_world=affine)
            write_volume(Volume(header=header, data=data), path)
        paths.append(path)
    return paths
