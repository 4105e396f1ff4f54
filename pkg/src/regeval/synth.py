"""Synthetic volume generation.

Everything the test suites and the demo pipeline register is produced here:
soft-edged ellipsoid phantoms with matching two-label segmentations, a
"wavy" phantom whose surface modulation is finer than a millimetre voxel
(for resolution-direction experiments), smooth random displacement fields,
and a small on-disk dataset with a subjects manifest.

All randomness flows through counter-based Philox generators keyed by an
explicit seed, so every artifact is reproducible cross-platform from the
seed alone.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geometry import DisplacementField
from .nifti import write_volume
from .volume import LabelVolume, Volume, VolumeHeader

SPHERE_LABELS = (1, 2)  # shell, core


def rng_for(seed: int) -> np.random.Generator:
    """Counter-based generator: identical streams on every platform."""
    return np.random.Generator(np.random.Philox(key=int(seed)))


def phantom_header(dims, spacing=1.0, orientation: str = "RAS") -> VolumeHeader:
    dims = tuple(int(d) for d in dims)
    if isinstance(spacing, (int, float)):
        spacing = (float(spacing),) * 3
    affine = np.diag([spacing[0], spacing[1], spacing[2], 1.0])
    hdr = VolumeHeader(dims=dims, spacing=tuple(spacing), voxel_to_world=affine)
    if orientation != "RAS":
        raise ValueError("phantoms are generated in RAS; reorient afterwards")
    return hdr


def _coords(dims):
    ax = [np.arange(d, dtype=np.float64) for d in dims]
    return np.meshgrid(*ax, indexing="ij")


def ellipsoid_phantom(dims, center=None, radii=(20.0, 20.0, 20.0),
                      spacing=1.0, edge_width: float = 1.5,
                      intensity: float = 1.0, core_fraction: float = 0.55):
    """Soft-edged ellipsoid with a two-label segmentation (shell + core).

    ``center`` and ``radii`` are in voxels of the generated grid. The
    intensity profile is a logistic ramp of the normalized radial excess,
    so the image is band-limited enough to interpolate cleanly; the labels
    threshold the same radial coordinate, giving analytically known masks.
    """
    header = phantom_header(dims, spacing)
    if center is None:
        center = [(d - 1) / 2.0 for d in dims]
    x, y, z = _coords(dims)
    rnorm = np.sqrt(((x - center[0]) / radii[0]) ** 2
                    + ((y - center[1]) / radii[1]) ** 2
                    + ((z - center[2]) / radii[2]) ** 2)
    mean_r = float(np.mean(radii))
    excess = (rnorm - 1.0) * mean_r  # approx signed distance in voxels
    data = intensity / (1.0 + np.exp(excess / (edge_width / 4.0)))

    labels = np.zeros(dims, dtype=np.int32)
    labels[rnorm <= 1.0] = SPHERE_LABELS[0]
    labels[rnorm <= core_fraction] = SPHERE_LABELS[1]
    return (Volume(header=header, data=data),
            LabelVolume(header=header.copy(), labels=labels))


def wavy_phantom(dims, spacing=1.0, base_radius_mm: float = 11.0,
                 ripple_mm: float = 0.5, ripple_cycles: int = 24,
                 edge_width_mm: float = 0.6, shift_mm=(0.0, 0.0, 0.0),
                 rim_mm: float = 1.5):
    """Ball with fine angular surface ripples and a thin rim label.

    With the defaults the ripple wavelength along the surface is about
    2.2mm: resolvable on a 0.6mm grid but below the Nyquist limit of a
    1mm grid, where it degrades into sampling noise.  Label 1 is the
    ball interior, label 2 a rim band ``rim_mm`` thick just inside the
    surface — the thin structure whose overlap rewards resolving the
    ripples.  ``shift_mm`` translates the whole ball in world
    millimetres, giving registration pairs a known smooth misalignment.
    """
    header = phantom_header(dims, spacing)
    if isinstance(spacing, (int, float)):
        spacing = (float(spacing),) * 3
    center = [(d - 1) / 2.0 for d in dims]
    x, y, z = _coords(dims)
    dx = (x - center[0]) * spacing[0] - shift_mm[0]
    dy = (y - center[1]) * spacing[1] - shift_mm[1]
    dz = (z - center[2]) * spacing[2] - shift_mm[2]
    r = np.sqrt(dx * dx + dy * dy + dz * dz)
    theta = np.arctan2(np.sqrt(dx * dx + dy * dy), dz + 1e-12)
    phi = np.arctan2(dy, dx)
    surface = base_radius_mm + ripple_mm * np.sin(ripple_cycles * theta) \
        * np.cos(ripple_cycles * phi)
    excess = r - surface
    data = 1.0 / (1.0 + np.exp(excess / (edge_width_mm / 4.0)))
    labels = np.zeros(tuple(int(d) for d in dims), dtype=np.int32)
    labels[excess <= -rim_mm] = 1
    labels[(excess > -rim_mm) & (excess <= 0.0)] = 2
    return (Volume(header=header, data=data),
            LabelVolume(header=header.copy(), labels=labels))


def monotone_remap(v: Volume, kind: str = "sqrt-compress") -> Volume:
    """Strictly monotone nonlinear intensity remap (simulates a contrast change)."""
    data = np.asarray(v.data, dtype=np.float64)
    lo, hi = float(data.min()), float(data.max())
    unit = (data - lo) / (hi - lo) if hi > lo else np.zeros_like(data)
    if kind == "sqrt-compress":
        out = np.sqrt(unit) * 0.7 + 0.1
    elif kind == "inverted":
        out = 1.0 - 0.8 * unit
    else:
        raise ValueError(f"unknown remap kind {kind!r}")
    return Volume(header=v.header.copy(), data=out)


def random_smooth_field(grid: VolumeHeader, amplitude_vox: float, seed: int,
                        smooth_vox: float = 4.0) -> DisplacementField:
    """Smooth random displacement field with a given peak magnitude."""
    rng = rng_for(seed)
    raw = rng.standard_normal(size=grid.dims + (3,))
    for c in range(3):
        raw[..., c] = ndimage.gaussian_filter(raw[..., c], smooth_vox,
                                              mode="nearest")
    peak = np.sqrt((raw**2).sum(axis=-1)).max()
    if peak > 0:
        raw *= amplitude_vox / peak
    return DisplacementField(grid=grid.copy(), vectors=raw)


def _mp2rage_like(data: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Tissue pushed to both extremes over a salt-and-pepper background.

    The background is uniform noise spanning the full intensity range (the
    hallmark of ratio-image contrasts, whose background is undefined), so
    the histogram carries prominent mass in both outer bands.
    """
    unit = np.clip(data, 0.0, 1.0)
    sharp = 0.5 + 0.5 * np.tanh(6.0 * (unit - 0.5))
    out = sharp + rng.normal(0.0, 0.015, size=data.shape)
    background = unit < 0.05
    out[background] = rng.uniform(0.0, 1.0, size=int(background.sum()))
    return np.clip(out, 0.0, 1.0)


def _mprage_like(data: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Dark background, mid-range tissue, and a sparse bright halo tail.

    The halo (a thin vessel/fat-like shell just outside the surface) keeps
    the robust intensity range above the tissue lobe, so the histogram has
    a single dark-end spike with tissue in mid-range and no prominent
    bright-end peak.
    """
    unit = np.clip(data, 0.0, 1.0)
    halo = 1.3 * np.exp(-(((unit - 0.08) / 0.05) ** 2))
    noise = np.abs(rng.normal(0.0, 0.01, size=data.shape))
    return 0.55 * unit + halo + noise


def make_subject(seed: int, dims=(48, 48, 48), sequence: str = "MPRAGE",
                 spacing=1.0):
    """One synthetic subject: jittered ellipsoid anatomy + 2-label map."""
    rng = rng_for(seed)
    dims = tuple(int(d) for d in dims)
    base = min(dims) * 0.28
    radii = base * (1.0 + rng.uniform(-0.15, 0.15, size=3))
    center = [(d - 1) / 2.0 + rng.uniform(-2.0, 2.0) for d in dims]
    vol, labels = ellipsoid_phantom(dims, center=center, radii=radii,
                                    spacing=spacing)
    styled = _mp2rage_like(vol.data, rng) if sequence == "MP2RAGE" \
        else _mprage_like(vol.data, rng)
    return Volume(header=vol.header, data=styled), labels


def make_dataset(out_dir, n_subjects: int = 3, dims=(48, 48, 48), seed: int = 7,
                 sequences=None, protocol: str = "synth") -> Path:
    """Write a small on-disk dataset plus its subjects manifest; returns the
    manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if sequences is None:
        sequences = ["MPRAGE" if i % 3 == 0 else "MP2RAGE"
                     for i in range(n_subjects)]
    if len(sequences) != n_subjects:
        raise ValueError("one sequence tag per subject required")

    entries = []
    for i in range(n_subjects):
        sid = f"sub-{i + 1:03d}"
        vol, labels = make_subject(seed * 1000 + i, dims=dims,
                                   sequence=sequences[i])
        img_path = out_dir / f"{sid}_image.nii.gz"
        lab_path = out_dir / f"{sid}_labels.nii.gz"
        write_volume(vol, img_path)
        write_volume(labels, lab_path)
        entries.append({
            "subject_id": sid,
            "image_path": img_path.name,
            "label_paths": {protocol: lab_path.name},
            "contrast": "T1w",
            "sequence": sequences[i],
            "native_spacing": list(vol.header.spacing),
        })

    manifest = {"dataset": "synthetic", "seed": seed, "subjects": entries}
    manifest_path = out_dir / "subjects.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest_path
