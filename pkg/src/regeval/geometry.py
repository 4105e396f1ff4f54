"""Interpolation, resampling, and spatial transforms.

All sampling is expressed in continuous voxel coordinates of the sampled
volume; world-coordinate mappings are folded into a single 4x4 matrix before
the per-point loop. Two interpolation modes exist: trilinear (8-corner
weighted blend) and nearest neighbour (ties at exact half-voxel coordinates
broken toward the lower index, for determinism across platforms).

Border policy: "zero" pads with 0 outside the volume, "clamp" extends edge
values. Label volumes always use background 0 outside regardless of policy.

Displacement fields hold voxel-unit vectors on the fixed grid and define the
transform x -> x + u(x). Composition and the stationary-velocity exponential
operate purely in that convention.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import TransformIntegrityError
from .volume import LabelVolume, Volume, VolumeHeader, voxel_index_grid

# A target grid is described by the same fields as a volume header.
GridSpec = VolumeHeader

_BORDERS = ("zero", "clamp")


@dataclass(eq=False)
class AffineTransform:
    """World-space affine, mapping fixed-world points to moving-world points."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"affine matrix must be 4x4, got {m.shape}")
        if not np.allclose(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("affine last row must be (0, 0, 0, 1)")
        if abs(np.linalg.det(m[:3, :3])) < 1e-12:
            raise ValueError("affine 3x3 block is singular")
        self.matrix = m

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.eye(4))

    def inverse(self) -> "AffineTransform":
        return AffineTransform(np.linalg.inv(self.matrix))

    def compose(self, other: "AffineTransform") -> "AffineTransform":
        """Transform applying ``other`` first, then ``self``."""
        return AffineTransform(self.matrix @ other.matrix)

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.matrix[:3, :3].T + self.matrix[:3, 3]

    def is_identity(self, tol: float = 1e-12) -> bool:
        return bool(np.allclose(self.matrix, np.eye(4), atol=tol))


@dataclass(eq=False)
class DisplacementField:
    """Dense voxel-unit displacement field on a fixed grid."""

    grid: VolumeHeader
    vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        expected = self.grid.dims + (3,)
        if v.shape != expected:
            raise ValueError(f"vector array shape {v.shape}, expected {expected}")
        self.vectors = v

    @classmethod
    def zero(cls, grid: VolumeHeader) -> "DisplacementField":
        return cls(grid=grid, vectors=np.zeros(grid.dims + (3,)))

    def validate_finite(self) -> None:
        if not np.all(np.isfinite(self.vectors)):
            raise TransformIntegrityError("displacement field has non-finite components")

    def max_magnitude(self) -> float:
        if self.vectors.size == 0:
            return 0.0
        return float(np.sqrt((self.vectors**2).sum(axis=-1).max()))

    def rms(self) -> float:
        return float(np.sqrt((self.vectors**2).sum(axis=-1).mean()))


def _check_border(border: str) -> None:
    if border not in _BORDERS:
        raise ValueError(f"border must be one of {_BORDERS}, got {border!r}")


def _gather(data: np.ndarray, idx: np.ndarray, border: str, outside):
    """Look up integer voxel indices with the given border policy."""
    dims = np.array(data.shape[:3])
    clipped = np.clip(idx, 0, dims - 1)
    vals = data[clipped[:, 0], clipped[:, 1], clipped[:, 2]]
    if border == "zero":
        inside = np.all((idx >= 0) & (idx < dims), axis=1)
        vals = np.where(inside, vals, outside)
    return vals


def _trilinear_values(data: np.ndarray, pts: np.ndarray, border: str) -> np.ndarray:
    dims = np.array(data.shape[:3], dtype=np.float64)
    pts = np.asarray(pts, dtype=np.float64)
    if border == "clamp":
        pts = np.clip(pts, 0.0, dims - 1.0)
    base = np.floor(pts)
    frac = pts - base
    base = base.astype(np.int64)
    data = np.asarray(data, dtype=np.float64)

    acc = np.zeros(len(pts))
    for dx in (0, 1):
        wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
        for dy in (0, 1):
            wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
            for dz in (0, 1):
                wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
                corner = base + (dx, dy, dz)
                vals = _gather(data, corner, border, 0.0)
                acc += wx * wy * wz * vals
    return acc


def _nearest_indices(pts: np.ndarray) -> np.ndarray:
    # idx = ceil(p - 0.5): rounds half-voxel ties toward the lower index
    return np.ceil(np.asarray(pts, dtype=np.float64) - 0.5).astype(np.int64)


def _nearest_values(data: np.ndarray, pts: np.ndarray, border: str, outside):
    idx = _nearest_indices(pts)
    if border == "clamp":
        idx = np.clip(idx, 0, np.array(data.shape[:3]) - 1)
    return _gather(data, idx, border, outside)


def _as_points(p):
    pts = np.atleast_2d(np.asarray(p, dtype=np.float64))
    if pts.shape[1] != 3:
        raise ValueError(f"points must have 3 components, got shape {pts.shape}")
    return pts, np.ndim(p) == 1


def sample_trilinear(v: Volume, p, border: str = "zero"):
    """Trilinear blend of the 8 voxels surrounding each point.

    ``p`` is one continuous voxel coordinate or an (N, 3) array of them;
    the return matches (scalar or length-N vector).
    """
    _check_border(border)
    if isinstance(v, LabelVolume):
        raise TypeError("trilinear sampling of labelmaps is undefined; "
                        "use transport.warp_labels")
    pts, single = _as_points(p)
    out = _trilinear_values(v.data, pts, border)
    return float(out[0]) if single else out


def sample_nearest(v, p, border: str = "zero"):
    """Value of the nearest lattice voxel (half-voxel ties to lower index)."""
    _check_border(border)
    if isinstance(v, LabelVolume):
        data, outside = v.labels, 0
        border = "zero"  # labels are background outside, always
    else:
        data, outside = v.data, 0
    pts, single = _as_points(p)
    out = _nearest_values(data, pts, border, outside)
    return out[0] if single else out


def _voxel_map(source: VolumeHeader, target: VolumeHeader,
               world_transform: np.ndarray | None = None) -> np.ndarray:
    """4x4 matrix taking target voxel coords to source voxel coords."""
    chain = target.voxel_to_world
    if world_transform is not None:
        chain = world_transform @ chain
    try:
        return np.linalg.inv(source.voxel_to_world) @ chain
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"singular affine in resampling chain: {exc}") from exc


def _sample_on_grid(v, pts_vox: np.ndarray, mode: str, border: str,
                    target: VolumeHeader):
    """Build an output volume by sampling ``v`` at the given voxel points."""
    if isinstance(v, LabelVolume):
        if mode != "nearest":
            raise TypeError("labelmaps resample with mode='nearest'; "
                            "use transport.warp_labels for probabilistic transport")
        vals = _nearest_values(v.labels, pts_vox, "zero", 0)
        labels = vals.reshape(target.dims).astype(v.labels.dtype)
        return LabelVolume(header=target.copy(), labels=labels)
    if mode == "trilinear":
        vals = _trilinear_values(v.data, pts_vox, border)
    elif mode == "nearest":
        vals = _nearest_values(v.data, pts_vox, border, 0).astype(np.float64)
    else:
        raise ValueError(f"mode must be 'trilinear' or 'nearest', got {mode!r}")
    return Volume(header=target.copy(), data=vals.reshape(target.dims))


def resample(v, target: GridSpec, mode: str = "trilinear", border: str = "zero"):
    """Resample onto ``target``, matching world position voxel by voxel."""
    _check_border(border)
    m = _voxel_map(v.header, target)
    pts = voxel_index_grid(target.dims) @ m[:3, :3].T + m[:3, 3]
    return _sample_on_grid(v, pts, mode, border, target)


def apply_affine(v, a: AffineTransform, target: GridSpec | None = None,
                 mode: str = "trilinear", border: str = "zero"):
    """Pull ``v`` back through a world affine onto ``target``.

    The output voxel at world position x takes the value of ``v`` at world
    position a(x).
    """
    _check_border(border)
    if target is None:
        target = v.header
    m = _voxel_map(v.header, target, a.matrix)
    pts = voxel_index_grid(target.dims) @ m[:3, :3].T + m[:3, 3]
    return _sample_on_grid(v, pts, mode, border, target)


def warp_points(phi: DisplacementField, pts_vox: np.ndarray) -> np.ndarray:
    """Map fixed-grid voxel points through x -> x + u(x), interpolating u."""
    shifted = np.empty_like(pts_vox)
    for c in range(3):
        shifted[:, c] = _trilinear_values(phi.vectors[..., c], pts_vox, "clamp")
    return pts_vox + shifted


def apply_warp(v, phi: DisplacementField, mode: str = "trilinear",
               border: str = "zero"):
    """Warp ``v`` by a displacement field; output lives on the field's grid."""
    _check_border(border)
    phi.validate_finite()
    pts = voxel_index_grid(phi.grid.dims) + phi.vectors.reshape(-1, 3)
    if not phi.grid.same_grid(v.header):
        m = _voxel_map(v.header, phi.grid)
        pts = pts @ m[:3, :3].T + m[:3, 3]
    return _sample_on_grid(v, pts, mode, border, phi.grid)


def crop_or_pad(v, target_dims, center="auto"):
    """Crop and/or zero-pad to ``target_dims`` around a center voxel.

    Retained voxels keep their world positions exactly (the affine origin is
    shifted by a whole-voxel offset). ``center="auto"`` centers the output on
    the volume's intensity centroid (nonzero-mass centroid for labelmaps).
    """
    target_dims = tuple(int(d) for d in target_dims)
    if len(target_dims) != 3 or any(d < 1 for d in target_dims):
        raise ValueError(f"target_dims must be 3 positive integers, got {target_dims}")
    data = v.labels if isinstance(v, LabelVolume) else v.data
    dims = v.header.dims

    if isinstance(center, str):
        if center != "auto":
            raise ValueError(f"center must be a coordinate or 'auto', got {center!r}")
        weights = (data != 0).astype(np.float64) if isinstance(v, LabelVolume) \
            else np.abs(np.asarray(data, dtype=np.float64))
        total = weights.sum()
        if total > 0:
            center = [float((weights.sum(axis=tuple(k for k in range(3) if k != ax))
                             * np.arange(dims[ax])).sum() / total) for ax in range(3)]
        else:
            center = [(d - 1) / 2.0 for d in dims]

    center = np.asarray(center, dtype=np.float64)
    offset = np.rint(center - (np.array(target_dims) - 1) / 2.0).astype(np.int64)

    out = np.zeros(target_dims, dtype=data.dtype)
    src_lo = np.maximum(offset, 0)
    src_hi = np.minimum(offset + target_dims, dims)
    if np.all(src_hi > src_lo):
        dst_lo = src_lo - offset
        dst_hi = src_hi - offset
        out[dst_lo[0]:dst_hi[0], dst_lo[1]:dst_hi[1], dst_lo[2]:dst_hi[2]] = \
            data[src_lo[0]:src_hi[0], src_lo[1]:src_hi[1], src_lo[2]:src_hi[2]]

    affine = v.header.voxel_to_world.copy()
    affine[:3, 3] = affine[:3, :3] @ offset + affine[:3, 3]
    header = v.header.copy(dims=target_dims, voxel_to_world=affine, orientation="")
    if isinstance(v, LabelVolume):
        return LabelVolume(header=header, labels=out)
    return Volume(header=header, data=out)


def jacobian_determinant(phi: DisplacementField) -> Volume:
    """Determinant of I + grad(u) per voxel.

    Central differences in the interior, one-sided at borders, taken in voxel
    index coordinates. Because the field is voxel-unit on its own grid, the
    result equals the physical volume-change factor (the grid affine
    conjugates the Jacobian and cancels in the determinant).
    """
    u = phi.vectors
    j = np.empty(phi.grid.dims + (3, 3))
    for comp in range(3):
        grads = np.gradient(u[..., comp], axis=(0, 1, 2), edge_order=1)
        for ax in range(3):
            j[..., comp, ax] = grads[ax]
    j[..., 0, 0] += 1.0
    j[..., 1, 1] += 1.0
    j[..., 2, 2] += 1.0
    det = np.linalg.det(j)
    return Volume(header=phi.grid.copy(), data=det)


def compose_displacements(inner: DisplacementField,
                          update: DisplacementField) -> DisplacementField:
    """Field of the composite map: ``update`` applied first, then ``inner``.

    Both fields live on the same grid. With u the update and d the inner
    field, the composite of x -> x + u(x) followed by y -> y + d(y) is
    x -> x + u(x) + d(x + u(x)), so the returned vectors are
    u + d(x + u), with d looked up trilinearly under edge clamping.
    """
    if not inner.grid.same_grid(update.grid):
        raise ValueError("displacement composition requires matching grids")
    pts = voxel_index_grid(inner.grid.dims) + update.vectors.reshape(-1, 3)
    composed = update.vectors.copy()
    for c in range(3):
        composed[..., c] += _trilinear_values(
            inner.vectors[..., c], pts, "clamp").reshape(inner.grid.dims)
    return DisplacementField(grid=inner.grid, vectors=composed)


def exp_velocity_field(velocity: DisplacementField,
                       squarings: int | None = None) -> DisplacementField:
    """Exponential of a stationary velocity field by scaling and squaring.

    The velocity is scaled down until its largest step is below half a voxel,
    then repeatedly composed with itself. Zero velocity gives the identity
    exactly; a constant velocity integrates to a translation by itself in
    the interior.
    """
    if squarings is None:
        peak = velocity.max_magnitude()
        squarings = 0
        if peak > 0.5:
            squarings = int(np.ceil(np.log2(peak / 0.5)))
        squarings = min(squarings, 12)
    u = DisplacementField(grid=velocity.grid,
                          vectors=velocity.vectors / (2.0 ** squarings))
    for _ in range(squarings):
        u = compose_displacements(u, u)
    return u


def field_to_world(phi: DisplacementField) -> np.ndarray:
    """Voxel-unit vectors converted to world-mm components."""
    return phi.vectors @ phi.grid.voxel_to_world[:3, :3].T


def affine_into_field(a: AffineTransform, phi: DisplacementField) -> DisplacementField:
    """Fold a world affine into a displacement field on the same fixed grid.

    Returns the single field of the total map: fixed voxel x is first moved
    by the field, and the result is then pushed through the affine, all in
    the moving-image lookup sense. With A_f the fixed grid affine,

        u_total(x) = A_f^{-1} a A_f (x + u(x)) - x
    """
    grid = phi.grid
    af = grid.voxel_to_world
    m = np.linalg.inv(af) @ a.matrix @ af
    pts = voxel_index_grid(grid.dims) + phi.vectors.reshape(-1, 3)
    mapped = pts @ m[:3, :3].T + m[:3, 3]
    total = (mapped - voxel_index_grid(grid.dims)).reshape(grid.dims + (3,))
    return DisplacementField(grid=grid, vectors=total)
