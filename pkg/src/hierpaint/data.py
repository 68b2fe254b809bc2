"""
Volumes on disk and in memory: NIfTI I/O, intensity normalization,
synthetic tissue phantoms, lesion-mask transplantation and the slice-stack
streams used for training each stage.
"""
from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import nibabel as nib
import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, DataError, VolumeIOError
from .orient import AXIAL, CORONAL, pad_volume, padded_shape, to_stack
from .resampling import DEFAULT_MARGIN, DEFAULT_Z_MAX, adaptive_downsample_z, crop_to_mask_z, spacing_augmentation

BACKGROUND, CSF, GM, WM = 0, 1, 2, 3
TISSUE_CLASSES = {"CSF": CSF, "GM": GM, "WM": WM}
TISSUE_INTENSITY = {CSF: 0.15, GM: 0.5, WM: 0.75}
MIN_PHANTOM_SHAPE = (32, 32, 16)
MANIFEST_FORMAT = "hierpaint-manifest"
MANIFEST_VERSION = 1


@dataclass
class Volume:
    array: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    affine: np.ndarray | None = None
    intensity_domain: str = "raw"

    def __post_init__(self):
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.array.ndim != 3:
            raise DataError(f"volume must be 3-D, got shape {self.array.shape}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise DataError(f"spacing must be three positive values, got {self.spacing}")
        if self.affine is None:
            self.affine = np.diag(list(self.spacing) + [1.0])

    @property
    def shape(self):
        return self.array.shape

    def with_array(self, array, **changes) -> "Volume":
        return replace(self, array=array, **changes)


# -- NIfTI -----------------------------------------------------------------

def _read_header_bytes(path: Path) -> bytes:
    with open(path, "rb") as f:
        head = f.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    try:
        with opener(path, "rb") as f:
            return f.read(352)
    except OSError as exc:
        raise VolumeIOError(f"{path}: unreadable compressed stream at byte offset 0: {exc}") from exc


def _validate_nifti_header(path: Path, hdr: bytes) -> None:
    if len(hdr) < 348:
        raise VolumeIOError(f"{path}: header truncated at byte offset {len(hdr)} (need 348 bytes)")
    for endian in "<>":
        if struct.unpack(endian + "i", hdr[0:4])[0] == 348:
            break
    else:
        raise VolumeIOError(f"{path}: malformed header at byte offset 0: sizeof_hdr is not 348")
    if hdr[344:348] not in (b"n+1\x00", b"ni1\x00"):
        raise VolumeIOError(f"{path}: malformed header at byte offset 344: bad NIfTI-1 magic {hdr[344:348]!r}")
    dims = struct.unpack(endian + "8h", hdr[40:56])
    if not 1 <= dims[0] <= 7:
        raise VolumeIOError(f"{path}: malformed header at byte offset 40: dim[0]={dims[0]}")
    extra = [d for d in dims[4 : dims[0] + 1] if d > 1]
    if dims[0] < 3 or extra:
        raise DataError(f"{path}: expected a 3-D image, header declares {dims[0]}-D dims {dims[1:dims[0] + 1]}")


def load_volume(path) -> Volume:
    """Read a 3-D NIfTI-1 file (.nii or .nii.gz)."""
    path = Path(path)
    if not path.exists():
        raise VolumeIOError(f"{path}: no such file")
    _validate_nifti_header(path, _read_header_bytes(path))
    try:
        img = nib.load(str(path))
        array = np.asanyarray(img.dataobj)
    except Exception as exc:
        raise VolumeIOError(f"{path}: {exc}") from exc
    array = array.reshape(array.shape[:3])
    spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
    domain = "normalized" if img.header.get("descrip", b"").tobytes().startswith(b"normalized") else "raw"
    return Volume(np.asarray(array), spacing, img.affine, domain)


def save_volume(volume: Volume, path) -> None:
    path = Path(path)
    img = nib.Nifti1Image(volume.array, volume.affine)
    img.header.set_zooms(volume.spacing)
    img.header.set_xyzt_units("mm")
    img.header["descrip"] = volume.intensity_domain.encode()[:80]
    try:
        nib.save(img, str(path))
    except OSError as exc:
        raise VolumeIOError(f"cannot write {path}: {exc}") from exc


# -- intensities -------------------------------------------------------------

@dataclass(frozen=True)
class NormalizationRecord:
    lo: float
    hi: float


def normalize_intensity(volume: Volume, exclude: np.ndarray | None = None):
    """Affine map of the intensity range onto [-1, 1].

    The range is taken over nonzero voxels outside ``exclude``, with its
    lower end anchored at zero for non-negative data so the background maps
    to exactly -1 and any amount of zero padding leaves the map unchanged.
    Returns (normalized volume, record).
    """
    a = volume.array
    sel = a != 0
    if exclude is not None:
        sel &= ~np.asarray(exclude, dtype=bool)
    if not sel.any():
        raise DataError("cannot normalize: no nonzero voxels")
    vmin, hi = float(a[sel].min()), float(a[sel].max())
    if not hi > vmin:
        raise DataError(f"cannot normalize a constant volume (value {vmin})")
    lo = min(0.0, vmin)
    out = (2.0 * (a.astype(np.float64) - lo) / (hi - lo) - 1.0).astype(np.float32)
    return volume.with_array(out, intensity_domain="normalized"), NormalizationRecord(lo, hi)


def denormalize_intensity(volume: Volume, record: NormalizationRecord, dtype=np.float32) -> Volume:
    a = (volume.array.astype(np.float64) + 1.0) * 0.5 * (record.hi - record.lo) + record.lo
    return volume.with_array(a.astype(dtype), intensity_domain="raw")


# -- phantoms ------------------------------------------------------------------

def _smooth_field(rng, shape, sigma_frac=0.25):
    """Zero-mean, unit-peak low-frequency random field."""
    sigma = [max(1.0, sigma_frac * s) for s in shape]
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    f -= f.mean()
    return f / max(np.abs(f).max(), 1e-12)


def generate_phantom(seed: int, shape=(64, 64, 48), spacing=(1.0, 1.0, 1.0), noise_sigma: float = 0.02):
    """Brain-like phantom with tissue labels.

    A wavy ellipsoidal brain holds a white-matter core inside a grey-matter
    shell with a thin outer CSF rim, plus two ventricle-like CSF inclusions.
    Tissue means (WM 0.75, GM 0.5, CSF 0.15) are modulated by a smooth bias
    field and corrupted with Gaussian noise; background stays exactly 0.
    Returns (Volume, label Volume).
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or any(s < m for s, m in zip(shape, MIN_PHANTOM_SHAPE)):
        raise ConfigurationError(f"phantom shape {shape} is smaller than the minimum {MIN_PHANTOM_SHAPE}")
    rng = np.random.default_rng(seed)
    dims = np.array(shape, dtype=np.float64)
    center = dims / 2 - 0.5 + rng.uniform(-0.03, 0.03, 3) * dims
    radii = dims * rng.uniform(0.40, 0.45, 3)
    grid = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij")
    u = [(g - c) / r for g, c, r in zip(grid, center, radii)]
    rho = np.sqrt(u[0] ** 2 + u[1] ** 2 + u[2] ** 2)

    outer = rho + 0.05 * _smooth_field(rng, shape, 0.2)
    inner = rho + 0.12 * _smooth_field(rng, shape, 0.12)

    labels = np.zeros(shape, dtype=np.uint8)
    brain = outer <= 1.0
    labels[brain] = CSF
    labels[brain & (outer <= 0.92)] = GM
    labels[brain & (outer <= 0.92) & (inner <= 0.68)] = WM
    vent_r = np.array([0.16, 0.34, 0.28]) * rng.uniform(0.9, 1.1, 3)
    for side in (-1.0, 1.0):
        c = np.array([side * 0.22, 0.05, 0.1]) + rng.uniform(-0.03, 0.03, 3)
        d = sum(((ui - ci) / ri) ** 2 for ui, ci, ri in zip(u, c, vent_r))
        labels[brain & (d <= 1.0)] = CSF

    means = np.zeros(4)
    for k, v in TISSUE_INTENSITY.items():
        means[k] = v
    bias = 1.0 + 0.05 * _smooth_field(rng, shape, 0.4)
    image = means[labels] * bias + noise_sigma * rng.standard_normal(shape)
    image = np.where(brain, np.clip(image, 0.01, 1.0), 0.0).astype(np.float32)
    return Volume(image, spacing), Volume(labels, spacing)


def brain_mask(volume) -> np.ndarray:
    a = volume.array if isinstance(volume, Volume) else np.asarray(volume)
    return a != 0


def generate_lesion_mask(shape, rng, radius_range=(0.12, 0.22)) -> np.ndarray:
    """Blobby ellipsoid centred in a volume of ``shape`` (radii as fractions)."""
    shape = tuple(int(s) for s in shape)
    radii = np.array(shape) * rng.uniform(*radius_range, 3)
    grid = np.meshgrid(*[np.arange(s, dtype=np.float64) - (s - 1) / 2 for s in shape], indexing="ij")
    rho = np.sqrt(sum((g / r) ** 2 for g, r in zip(grid, radii)))
    rho = rho + 0.15 * _smooth_field(rng, shape, 0.15)
    mask = (rho <= 1.0).astype(np.uint8)
    if not mask.any():
        mask[tuple(s // 2 for s in shape)] = 1
    return mask


def transplant_mask(healthy, lesion_mask: np.ndarray, rng, max_tries: int = 2000) -> np.ndarray:
    """Translate a lesion mask to a random spot lying entirely on brain tissue.

    Rejection-samples integer translations that keep the lesion inside the
    volume; raises DataError when none of ``max_tries`` placements fits.
    """
    brain = brain_mask(healthy)
    lesion = np.asarray(lesion_mask) > 0
    if lesion.shape != brain.shape:
        raise ConfigurationError(f"lesion mask {lesion.shape} does not match volume {brain.shape}")
    idx = np.argwhere(lesion)
    if idx.size == 0:
        raise DataError("lesion mask is empty")
    lo, hi = idx.min(axis=0), idx.max(axis=0)
    shift_lo = -lo
    shift_hi = np.array(brain.shape) - 1 - hi
    for _ in range(max_tries):
        shift = rng.integers(shift_lo, shift_hi + 1)
        moved = idx + shift
        if brain[tuple(moved.T)].all():
            out = np.zeros(brain.shape, dtype=np.uint8)
            out[tuple(moved.T)] = 1
            return out
    raise DataError(f"no in-brain placement found for the lesion mask after {max_tries} tries")


# -- manifests -------------------------------------------------------------------

def write_manifest(path, entries) -> None:
    doc = {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION, "entries": list(entries)}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def read_manifest(path) -> list:
    """Entries with file paths resolved relative to the manifest."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if doc.get("format") != MANIFEST_FORMAT or "entries" not in doc:
        raise DataError(f"{path} is not a {MANIFEST_FORMAT} file")
    entries = []
    for e in doc["entries"]:
        if "image" not in e or "mask" not in e:
            raise DataError(f"{path}: manifest entry {e} lacks image/mask")
        entries.append({k: (str(path.parent / v) if k in ("image", "mask", "labels") else v) for k, v in e.items()})
    return entries


# -- training streams ---------------------------------------------------------------

@dataclass
class PairSettings:
    z_max: int = DEFAULT_Z_MAX
    chunk: int = 16
    margin: int = DEFAULT_MARGIN
    factor_range: tuple = (1.0, 2.0)
    multiple: int = 8


@dataclass
class _Prepared:
    array: np.ndarray
    mask: np.ndarray


def prepare_volume(volume, mask, multiple: int = 8):
    """Normalize (range taken outside the mask) and zero-pad to a multiple."""
    vol = volume if isinstance(volume, Volume) else Volume(np.asarray(volume, dtype=np.float32))
    mask = np.asarray(mask)
    if mask.shape != vol.shape:
        raise DataError(f"mask shape {mask.shape} does not match volume shape {vol.shape}")
    norm, rec = normalize_intensity(vol, exclude=mask > 0)
    target = padded_shape(vol.shape, multiple)
    # padding carries the normalized value of a raw zero
    background = np.float32(-2.0 * rec.lo / (rec.hi - rec.lo) - 1.0)
    arr = pad_volume(norm.array - background, target) + background
    # tissue under the mask may sit slightly outside the range seen elsewhere
    arr = np.clip(arr, -1.0, 1.0)
    return arr.astype(np.float32), pad_volume((mask > 0).astype(np.float32), target)


def prepare_training_sources(volumes, masks, stage: str, settings: PairSettings | None = None) -> list:
    """Normalize and pad every volume with a nonempty mask once, up front."""
    settings = settings or PairSettings()
    if stage not in (AXIAL, CORONAL):
        raise ConfigurationError(f"stage must be {AXIAL!r} or {CORONAL!r}, got {stage!r}")
    if len(volumes) != len(masks):
        raise DataError(f"{len(volumes)} volumes but {len(masks)} masks")
    prepared = []
    for v, m in zip(volumes, masks):
        if not np.asarray(m).any():
            continue
        arr, mk = prepare_volume(v, m, settings.multiple)
        if stage == CORONAL and arr.shape[1] < settings.chunk:
            raise DataError(f"volume with {arr.shape[1]} coronal slices is shallower than chunk {settings.chunk}")
        prepared.append(_Prepared(arr, mk))
    if not prepared:
        raise DataError("no volume with a nonempty mask")
    return prepared


def draw_training_pair(sources, stage: str, rng, settings: PairSettings | None = None):
    settings = settings or PairSettings()
    draw = _axial_pair if stage == AXIAL else _coronal_pair
    while True:
        pair = draw(sources[int(rng.integers(len(sources)))], rng, settings)
        if pair[1].any():
            return pair


def make_training_pairs(volumes, masks, stage: str, rng, settings: PairSettings | None = None):
    """Endless stream of normalized (x0, m) slice stacks of shape (b, h, w).

    axial: z-cropped around the lesion, spacing-augmented and squeezed to at
    most ``z_max`` slices. coronal: windows of ``chunk`` consecutive
    coronal slices that intersect the lesion. Volumes with empty masks are
    skipped.
    """
    settings = settings or PairSettings()
    sources = prepare_training_sources(volumes, masks, stage, settings)
    while True:
        yield draw_training_pair(sources, stage, rng, settings)


def _axial_pair(p: _Prepared, rng, s: PairSettings):
    sub, subm, _ = crop_to_mask_z(p.array, p.mask, s.margin)
    x0, m = spacing_augmentation(to_stack(sub, AXIAL), to_stack(subm, AXIAL), rng, s.factor_range)
    if x0.shape[0] > s.z_max:
        vol, mk, _ = adaptive_downsample_z(np.moveaxis(x0, 0, -1), np.moveaxis(m, 0, -1), s.z_max)
        x0, m = np.moveaxis(vol, -1, 0), np.moveaxis(mk, -1, 0)
    return np.ascontiguousarray(x0, dtype=np.float32), np.ascontiguousarray(m, dtype=np.float32)


def _coronal_pair(p: _Prepared, rng, s: PairSettings):
    stack, mstack = to_stack(p.array, CORONAL), to_stack(p.mask, CORONAL)
    ys = np.flatnonzero(mstack.any(axis=(1, 2)))
    n = stack.shape[0]
    first = max(0, int(ys[0]) - s.chunk + 1)
    last = min(n - s.chunk, int(ys[-1]))
    start = int(rng.integers(first, max(first, last) + 1))
    window = slice(start, start + s.chunk)
    return np.ascontiguousarray(stack[window]), np.ascontiguousarray(mstack[window])
