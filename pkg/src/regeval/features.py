"""Modality-independent descriptors and intensity-histogram profiling.

The MIND descriptor encodes, per voxel, the self-similarity of the image
patch around that voxel to the patches around its 6 face neighbours:
channel r is exp(-(D_r - min_r D_r) / V) where D_r is the Gaussian-weighted
patch SSD toward offset r and V is the neighbourhood mean of D floored at a
small fraction of the image variance. Writing the exponent relative to the
minimum makes each voxel's best channel exactly 1 and keeps the arithmetic
stable. Both D and V scale quadratically under intensity maps a*I + b, so
the descriptor is invariant to global positive-affine intensity changes,
which is what makes it usable across MRI contrasts.

Histogram profiling bins in-mask intensities over the robust 0.5-99.5
percentile range (values outside are clipped in, so counts always sum to
the mask size), smooths with a 3-bin average, and reports prominence-based
peaks. The unimodal/multimodal call is a labeled heuristic: at least two
peaks with one in the lowest and one in the highest 15% of bins.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, signal

from .errors import GridMismatchError
from .volume import Volume

FACE_OFFSETS = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))


@dataclass(frozen=True)
class MindConfig:
    patch_radius: int = 1
    variance_floor: float = 1e-6  # fraction of image intensity variance

    def __post_init__(self):
        if self.patch_radius < 1:
            raise ValueError("patch_radius must be >= 1")
        if self.variance_floor <= 0:
            raise ValueError("variance_floor must be positive")


def _patch_kernel(radius: int) -> np.ndarray:
    sigma = 0.5 * radius
    grid = np.arange(-radius, radius + 1, dtype=np.float64)
    g1 = np.exp(-0.5 * (grid / sigma) ** 2)
    k = g1[:, None, None] * g1[None, :, None] * g1[None, None, :]
    return k / k.sum()


def _shift_replicate(data: np.ndarray, offset) -> np.ndarray:
    """data(x + offset) with edge replication."""
    out = data
    for ax, d in enumerate(offset):
        if d == 0:
            continue
        idx = np.clip(np.arange(data.shape[ax]) + d, 0, data.shape[ax] - 1)
        out = np.take(out, idx, axis=ax)
    return out


def mind(v: Volume, cfg: MindConfig | None = None) -> np.ndarray:
    """MIND channels, shape dims + (6,), one channel per face offset.

    Each voxel's largest channel is exactly 1. Constant images degenerate
    to all channels 1 (the variance floor takes over).
    """
    cfg = cfg or MindConfig()
    data = np.asarray(v.data, dtype=np.float64)
    kernel = _patch_kernel(cfg.patch_radius)

    dist = np.empty(data.shape + (len(FACE_OFFSETS),))
    for i, off in enumerate(FACE_OFFSETS):
        diff = data - _shift_replicate(data, off)
        dist[..., i] = ndimage.convolve(diff * diff, kernel, mode="nearest")

    floor = cfg.variance_floor * float(np.var(data))
    variance = np.maximum(dist.mean(axis=-1), max(floor, 1e-300))
    channels = np.exp(-(dist - dist.min(axis=-1, keepdims=True))
                      / variance[..., None])
    return channels


def mind_ssd(a: Volume, b: Volume, cfg: MindConfig | None = None):
    """Mean squared MIND-channel difference plus its displacement gradient.

    The gradient treats the descriptor fields as frozen images (only their
    spatial position varies), the standard approximation when this drives a
    registration step: g(x) = (2 / (N C)) * sum_c (Mb_c - Ma_c) grad(Mb_c),
    with grad by central differences in voxel units. Returned as
    (loss, gradient of shape dims + (3,)) where the gradient is with respect
    to a displacement applied to ``b``.
    """
    if not a.header.same_grid(b.header):
        raise GridMismatchError("mind_ssd needs both volumes on the same grid")
    ma = mind(a, cfg)
    mb = mind(b, cfg)
    resid = mb - ma
    n_vox = ma.shape[0] * ma.shape[1] * ma.shape[2]
    n_chan = ma.shape[-1]
    loss = float((resid**2).sum() / (n_vox * n_chan))

    grad = np.zeros(a.header.dims + (3,))
    scale = 2.0 / (n_vox * n_chan)
    for c in range(n_chan):
        gx, gy, gz = np.gradient(mb[..., c], axis=(0, 1, 2), edge_order=1)
        grad[..., 0] += resid[..., c] * gx
        grad[..., 1] += resid[..., c] * gy
        grad[..., 2] += resid[..., c] * gz
    grad *= scale
    return loss, grad


@dataclass
class HistogramProfile:
    """Robust-range intensity histogram with peak structure."""

    bin_edges: np.ndarray
    counts: np.ndarray
    peaks: list = field(default_factory=list)  # (bin index, prominence), by prominence desc
    modality_guess: str = "unimodal"
    classifier: str = "histogram-heuristic"


N_BINS = 256
PEAK_PROMINENCE_FRACTION = 0.02
OUTER_BAND_FRACTION = 0.15


def histogram_profile(v: Volume, mask=None) -> HistogramProfile:
    """Profile the intensity distribution of the in-mask voxels.

    ``mask`` may be a LabelVolume or boolean array; nonzero selects. The
    range is the 0.5-99.5 percentile span, with outliers clipped into the
    edge bins so counts sum to the mask size.
    """
    data = np.asarray(v.data, dtype=np.float64)
    if mask is not None:
        sel = mask.labels != 0 if hasattr(mask, "labels") else np.asarray(mask) != 0
        if sel.shape != data.shape:
            raise GridMismatchError("mask shape does not match the volume")
        values = data[sel]
    else:
        values = data.ravel()
    if values.size == 0:
        raise ValueError("empty mask: no voxels to profile")

    lo, hi = np.percentile(values, [0.5, 99.5])
    if hi <= lo:
        hi = lo + max(abs(lo), 1.0) * 1e-6
    clipped = np.clip(values, lo, hi)
    counts, edges = np.histogram(clipped, bins=N_BINS, range=(lo, hi))

    smoothed = np.convolve(counts.astype(np.float64), np.full(3, 1.0 / 3.0),
                           mode="same")
    # zero padding lets maxima at the first/last bin register as peaks
    padded = np.concatenate([[0.0], smoothed, [0.0]])
    threshold = PEAK_PROMINENCE_FRACTION * float(smoothed.max()) if smoothed.max() > 0 else 0.0
    idx, props = signal.find_peaks(padded, prominence=max(threshold, 1e-12))
    peaks = sorted(
        ((int(i - 1), float(p)) for i, p in zip(idx, props["prominences"])),
        key=lambda t: (-t[1], t[0]))

    low_band = OUTER_BAND_FRACTION * N_BINS
    high_band = (1.0 - OUTER_BAND_FRACTION) * N_BINS
    has_low = any(i < low_band for i, _ in peaks)
    has_high = any(i >= high_band for i, _ in peaks)
    guess = "multimodal" if len(peaks) >= 2 and has_low and has_high else "unimodal"
    return HistogramProfile(bin_edges=edges, counts=counts, peaks=peaks,
                            modality_guess=guess)
