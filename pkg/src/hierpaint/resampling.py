"""
Adaptive z-resampling for the axial stage.

Volumes are (x, y, z) arrays. The axial stage crops z to the lesion extent,
squeezes the crop to at most ``z_max`` slices with linear interpolation and,
after inpainting, restores the original slice count with Catmull-Rom cubic
interpolation. In-plane axes are never touched.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from .errors import ConfigurationError, DataError

DEFAULT_MARGIN = 4
DEFAULT_Z_MAX = 24


@dataclass(frozen=True)
class ResampleRecord:
    z_lo: int
    z_hi: int
    original_depth: int
    target_depth: int
    margin: int = DEFAULT_MARGIN

    @property
    def cropped_depth(self) -> int:
        return self.z_hi - self.z_lo + 1

    @property
    def scale(self) -> float:
        return self.target_depth / self.cropped_depth

    def to_dict(self) -> dict:
        return asdict(self)


def mask_z_extent(mask: np.ndarray) -> tuple[int, int]:
    zs = np.flatnonzero(np.asarray(mask).any(axis=(0, 1)))
    if zs.size == 0:
        raise DataError("no region to inpaint: mask is empty")
    return int(zs[0]), int(zs[-1])


def crop_to_mask_z(volume: np.ndarray, mask: np.ndarray, margin: int = DEFAULT_MARGIN):
    """Crop both arrays along z to the mask extent widened by ``margin``."""
    if volume.shape != mask.shape:
        raise ConfigurationError(f"volume {volume.shape} and mask {mask.shape} differ in shape")
    if margin < 0:
        raise ConfigurationError(f"margin must be non-negative, got {margin}")
    first, last = mask_z_extent(mask)
    depth = volume.shape[2]
    z_lo = max(0, first - margin)
    z_hi = min(depth - 1, last + margin)
    record = ResampleRecord(z_lo, z_hi, depth, z_hi - z_lo + 1, margin)
    return volume[:, :, z_lo : z_hi + 1], mask[:, :, z_lo : z_hi + 1], record


def _sample_positions(n_in: int, n_out: int) -> np.ndarray:
    # end slices map onto end slices
    if n_out == 1:
        return np.zeros(1)
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def linear_resize_z(volume: np.ndarray, depth: int) -> np.ndarray:
    n = volume.shape[-1]
    if depth == n:
        return volume.copy()
    pos = _sample_positions(n, depth)
    lo = np.clip(np.floor(pos).astype(np.int64), 0, n - 1)
    hi = np.minimum(lo + 1, n - 1)
    frac = (pos - lo).astype(volume.dtype)
    return volume[..., lo] * (1 - frac) + volume[..., hi] * frac


def nearest_resize_z(mask: np.ndarray, depth: int) -> np.ndarray:
    n = mask.shape[-1]
    idx = np.clip(np.floor(_sample_positions(n, depth) + 0.5).astype(np.int64), 0, n - 1)
    return mask[..., idx]


def adaptive_downsample_z(subvolume, submask, z_max: int = DEFAULT_Z_MAX, record: ResampleRecord | None = None):
    """Shrink the crop to ``z_max`` slices when it is deeper; otherwise copy.

    The volume is linearly interpolated, the mask nearest-neighbour sampled
    and re-binarized. Returns (volume, mask, record).
    """
    if z_max < 2:
        raise ConfigurationError(f"z_max must be at least 2, got {z_max}")
    depth = subvolume.shape[2]
    if record is None:
        record = ResampleRecord(0, depth - 1, depth, depth, 0)
    elif record.cropped_depth != depth:
        raise ConfigurationError(f"record describes {record.cropped_depth} slices, volume has {depth}")
    if depth <= z_max:
        return subvolume.copy(), submask.copy(), replace(record, target_depth=depth)
    vol = linear_resize_z(subvolume, z_max)
    mask = (nearest_resize_z(submask, z_max) > 0.5).astype(submask.dtype)
    return vol, mask, replace(record, target_depth=z_max)


def catmull_rom_resize_z(volume: np.ndarray, depth: int) -> np.ndarray:
    """Catmull-Rom interpolation along the last axis with clamped ends."""
    n = volume.shape[-1]
    if depth == n:
        return volume.copy()
    pos = _sample_positions(n, depth)
    i1 = np.clip(np.floor(pos).astype(np.int64), 0, n - 1)
    s = pos - i1
    i0 = np.clip(i1 - 1, 0, n - 1)
    i2 = np.clip(i1 + 1, 0, n - 1)
    i3 = np.clip(i1 + 2, 0, n - 1)
    s2, s3 = s * s, s * s * s
    w0 = 0.5 * (-s3 + 2 * s2 - s)
    w1 = 0.5 * (3 * s3 - 5 * s2 + 2)
    w2 = 0.5 * (-3 * s3 + 4 * s2 + s)
    w3 = 0.5 * (s3 - s2)
    v = volume.astype(np.float64, copy=False)
    out = v[..., i0] * w0 + v[..., i1] * w1 + v[..., i2] * w2 + v[..., i3] * w3
    return out.astype(volume.dtype, copy=False)


def restore_z_cubic(resampled: np.ndarray, record: ResampleRecord) -> np.ndarray:
    """Undo :func:`adaptive_downsample_z`: back to the cropped slice count."""
    if resampled.shape[2] != record.target_depth:
        raise ConfigurationError(
            f"volume has {resampled.shape[2]} slices but the record expects {record.target_depth}"
        )
    return catmull_rom_resize_z(resampled, record.cropped_depth)


def spacing_augmentation(x0: np.ndarray, mask: np.ndarray | None, rng, factor_range=(1.0, 2.0)):
    """Thin a (b, h, w) slice stack by a random spacing factor.

    The factor is drawn uniformly from ``factor_range`` (a sub-interval of
    [1, 5]); the stack is linearly resampled to round(b / factor) slices and
    the mask, if given, is resampled to match. Returns (stack, mask).
    """
    lo, hi = factor_range
    if not 1.0 <= lo <= hi <= 5.0:
        raise ConfigurationError(f"factor range {factor_range} must lie within [1, 5]")
    factor = rng.uniform(lo, hi) if hi > lo else lo
    b = x0.shape[0]
    depth = max(1, int(round(b / factor)))
    if depth == b:
        return x0.copy(), None if mask is None else mask.copy()
    # slice axis first here; the resize helpers work on the last axis
    out = np.moveaxis(linear_resize_z(np.moveaxis(x0, 0, -1), depth), -1, 0)
    if mask is None:
        return out, None
    m = np.moveaxis(nearest_resize_z(np.moveaxis(mask, 0, -1), depth), -1, 0)
    return out, (m > 0.5).astype(mask.dtype)
