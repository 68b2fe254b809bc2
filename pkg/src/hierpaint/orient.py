"""
Axis bookkeeping between (x, y, z) volumes and slice stacks, plus padding.

Axis convention for a stored (x, y, z) array:

* axial stack:   slices along z, shape (z, x, y)
* coronal stack: slices along y (anterior-posterior), shape (y, x, z)

so a (256, 256, 160) volume gives 160 axial slices of 256x256 and 256
coronal slices of 256x160.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigurationError

AXIAL = "axial"
CORONAL = "coronal"

# stack axis order expressed as volume axes
_STACK_AXES = {AXIAL: (2, 0, 1), CORONAL: (1, 0, 2)}


def _axes(name):
    try:
        return _STACK_AXES[name]
    except KeyError:
        raise ConfigurationError(f"unknown orientation {name!r}; expected {AXIAL!r} or {CORONAL!r}") from None


def to_stack(volume: np.ndarray, axis: str) -> np.ndarray:
    return np.transpose(volume, _axes(axis))


def from_stack(stack: np.ndarray, axis: str) -> np.ndarray:
    return np.transpose(stack, np.argsort(_axes(axis)))


def reorient(stack: np.ndarray, from_axis: str, to_axis: str) -> np.ndarray:
    """Re-slice a stack from one orientation into another (lossless)."""
    return to_stack(from_stack(stack, from_axis), to_axis)


def pad_offsets(shape, target) -> tuple:
    if len(shape) != len(target):
        raise ConfigurationError(f"cannot pad {len(shape)}-d shape to {len(target)}-d target")
    if any(t < s for s, t in zip(shape, target)):
        raise ConfigurationError(f"target shape {tuple(target)} is smaller than volume shape {tuple(shape)}")
    # the odd voxel goes to the high side
    return tuple((t - s) // 2 for s, t in zip(shape, target))


def pad_volume(volume: np.ndarray, target) -> np.ndarray:
    """Symmetric zero padding to ``target``."""
    offsets = pad_offsets(volume.shape, target)
    widths = [(o, t - s - o) for o, s, t in zip(offsets, volume.shape, target)]
    return np.pad(volume, widths)


def unpad_volume(volume: np.ndarray, shape) -> np.ndarray:
    """Inverse of :func:`pad_volume` for an original ``shape``."""
    offsets = pad_offsets(shape, volume.shape)
    return volume[tuple(slice(o, o + s) for o, s in zip(offsets, shape))]


def padded_shape(shape, multiple: int) -> tuple:
    return tuple(-(-s // multiple) * multiple for s in shape)
