"""Core volume types: headers, scalar volumes, labelmaps, and orientation handling.

Conventions used throughout the package:

* voxel data is a 3D numpy array indexed ``data[i, j, k]`` (first index varies
  fastest in file order);
* ``voxel_to_world`` maps homogeneous voxel indices to world millimetres;
* orientation codes are three letters, one per voxel axis, naming the world
  direction in which that axis increases (``RAS``, ``LPS``, ...).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from .errors import NonFiniteDataError

_AXIS_LETTERS = (("L", "R"), ("P", "A"), ("I", "S"))  # world axis -> (neg, pos)
_LETTER_TO_AXIS = {
    "R": (0, 1), "L": (0, -1),
    "A": (1, 1), "P": (1, -1),
    "S": (2, 1), "I": (2, -1),
}


def orientation_from_affine(voxel_to_world: np.ndarray) -> str:
    """Extract the dominant-axis orientation code from a voxel-to-world affine.

    Each voxel axis is assigned the world axis with the largest absolute
    direction-cosine, greedily from strongest to weakest so that every world
    axis is claimed exactly once (handles oblique affines deterministically).
    """
    m = np.asarray(voxel_to_world, dtype=float)[:3, :3]
    if abs(np.linalg.det(m)) < 1e-12:
        raise ValueError("voxel_to_world has a singular 3x3 block")
    mags = np.abs(m.copy())
    letters = [""] * 3
    for _ in range(3):
        world, vox = np.unravel_index(int(np.argmax(mags)), mags.shape)
        neg, pos = _AXIS_LETTERS[world]
        letters[vox] = pos if m[world, vox] > 0 else neg
        mags[world, :] = -1.0
        mags[:, vox] = -1.0
    return "".join(letters)


def validate_orientation_code(code: str) -> str:
    """Check that ``code`` is a signed permutation of the anatomical axes."""
    if not isinstance(code, str) or len(code) != 3:
        raise ValueError(f"orientation code must be 3 letters, got {code!r}")
    code = code.upper()
    axes = []
    for ch in code:
        if ch not in _LETTER_TO_AXIS:
            raise ValueError(f"invalid orientation letter {ch!r} in {code!r}")
        axes.append(_LETTER_TO_AXIS[ch][0])
    if sorted(axes) != [0, 1, 2]:
        raise ValueError(f"orientation code {code!r} does not cover all three axes")
    return code


@dataclass(eq=False)
class VolumeHeader:
    """Grid geometry and scalar-type metadata of a volume."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    voxel_to_world: np.ndarray  # 4x4, float64
    orientation: str = ""
    datatype_code: int = 16  # NIfTI float32 by default
    intent: str = ""
    affine_source: str = "sform"  # which header transform populated the affine

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.dims) != 3 or any(d < 1 for d in self.dims):
            raise ValueError(f"dims must be 3 positive integers, got {self.dims}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be 3 positive reals, got {self.spacing}")
        m = np.array(self.voxel_to_world, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"voxel_to_world must be 4x4, got shape {m.shape}")
        if abs(np.linalg.det(m[:3, :3])) < 1e-12:
            raise ValueError("voxel_to_world has a singular 3x3 block")
        self.voxel_to_world = m
        if not self.orientation:
            self.orientation = orientation_from_affine(m)
        else:
            self.orientation = validate_orientation_code(self.orientation)

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    def voxel_to_world_points(self, pts: np.ndarray) -> np.ndarray:
        """Map (N, 3) continuous voxel coordinates to world mm."""
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.voxel_to_world[:3, :3].T + self.voxel_to_world[:3, 3]

    def world_to_voxel_points(self, pts: np.ndarray) -> np.ndarray:
        """Map (N, 3) world-mm coordinates to continuous voxel coordinates."""
        inv = np.linalg.inv(self.voxel_to_world)
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ inv[:3, :3].T + inv[:3, 3]

    def same_grid(self, other: "VolumeHeader", tol: float = 1e-6) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.voxel_to_world, other.voxel_to_world, atol=tol)
        )

    def copy(self, **changes) -> "VolumeHeader":
        out = replace(self, **changes)
        out.voxel_to_world = np.array(out.voxel_to_world, dtype=np.float64)
        return out


def header_from_affine(dims, voxel_to_world, datatype_code=16, intent="",
                       affine_source="sform") -> VolumeHeader:
    """Build a header deriving spacing from the affine's column norms."""
    m = np.asarray(voxel_to_world, dtype=np.float64)
    spacing = tuple(float(np.linalg.norm(m[:3, j])) for j in range(3))
    return VolumeHeader(dims=tuple(dims), spacing=spacing, voxel_to_world=m,
                        datatype_code=datatype_code, intent=intent,
                        affine_source=affine_source)


@dataclass(eq=False)
class Volume:
    """A dense scalar 3D image. Treated as immutable after construction."""

    header: VolumeHeader
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.shape != self.header.dims:
            raise ValueError(
                f"data shape {self.data.shape} does not match dims {self.header.dims}"
            )

    def validate_finite(self):
        if np.issubdtype(self.data.dtype, np.floating) and not np.all(np.isfinite(self.data)):
            n_bad = int(np.size(self.data) - np.count_nonzero(np.isfinite(self.data)))
            raise NonFiniteDataError(f"volume contains {n_bad} non-finite voxels")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.header.dims


@dataclass(eq=False)
class LabelVolume:
    """Integer-coded segmentation sharing a Volume's grid. 0 is background."""

    header: VolumeHeader
    labels: np.ndarray
    label_set: tuple[int, ...] = field(default=())

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise ValueError(f"labels must be an integer array, got {self.labels.dtype}")
        if self.labels.shape != self.header.dims:
            raise ValueError(
                f"labels shape {self.labels.shape} does not match dims {self.header.dims}"
            )
        present = tuple(int(v) for v in np.unique(self.labels) if v != 0)
        if not self.label_set:
            self.label_set = present
        elif tuple(self.label_set) != present:
            raise ValueError(
                f"label_set {self.label_set} does not match values present {present}"
            )

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.header.dims


def _reorient_plan(current: str, target: str):
    """Axis permutation and flips mapping a ``current``-oriented array to ``target``."""
    perm = [0, 0, 0]
    flip = [False, False, False]
    src_axes = {_LETTER_TO_AXIS[ch][0]: (j, _LETTER_TO_AXIS[ch][1])
                for j, ch in enumerate(current)}
    for k, ch in enumerate(target):
        world, want_sign = _LETTER_TO_AXIS[ch]
        j, have_sign = src_axes[world]
        perm[k] = j
        flip[k] = want_sign != have_sign
    return perm, flip


def reorient(v: Volume | LabelVolume, target: str) -> Volume | LabelVolume:
    """Permute/flip voxel axes so the orientation code becomes ``target``.

    World coordinates of every voxel centre are preserved; only the index
    order changes. Works for both scalar and label volumes.
    """
    target = validate_orientation_code(target)
    hdr = v.header
    current = hdr.orientation
    data = v.labels if isinstance(v, LabelVolume) else v.data
    if current == target:
        return v

    perm, flip = _reorient_plan(current, target)
    out = np.transpose(data, perm)
    flip_axes = [k for k in range(3) if flip[k]]
    if flip_axes:
        out = np.flip(out, axis=flip_axes)
    out = np.ascontiguousarray(out)

    # Index map: old_index = P3 @ new_index + p0, so A_new = A_old @ [P3 p0; 0 1].
    p3 = np.zeros((3, 3))
    p0 = np.zeros(3)
    for k in range(3):
        j = perm[k]
        if flip[k]:
            p3[j, k] = -1.0
            p0[j] = hdr.dims[j] - 1
        else:
            p3[j, k] = 1.0
    index_map = np.eye(4)
    index_map[:3, :3] = p3
    index_map[:3, 3] = p0
    new_affine = hdr.voxel_to_world @ index_map

    new_hdr = hdr.copy(
        dims=tuple(out.shape),
        spacing=tuple(hdr.spacing[perm[k]] for k in range(3)),
        voxel_to_world=new_affine,
        orientation=target,
    )
    if isinstance(v, LabelVolume):
        return LabelVolume(header=new_hdr, labels=out)
    return Volume(header=new_hdr, data=out)


def voxel_index_grid(dims: Iterable[int]) -> np.ndarray:
    """(N, 3) array of all integer voxel indices in C order."""
    nx, ny, nz = dims
    ii, jj, kk = np.meshgrid(
        np.arange(nx, dtype=np.float64),
        np.arange(ny, dtype=np.float64),
        np.arange(nz, dtype=np.float64),
        indexing="ij",
    )
    return np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1)
