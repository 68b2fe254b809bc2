"""
Masked-region image metrics (MSE, PSNR, 3D SSIM), Dice overlap for tissue
labels, and the mean +/- std report over a suite of volumes.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import CSF, GM, TISSUE_CLASSES, TISSUE_INTENSITY, WM
from .errors import DataError

PSNR_CAP = 100.0
SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
REPORT_FORMAT = "hierpaint-metrics"
REPORT_VERSION = 1
REPORT_FIELDS = ("name", "masked_mse", "masked_psnr", "masked_ssim", "dice_CSF", "dice_GM", "dice_WM")


def _masked_pair(pred, truth, mask):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    mask = np.asarray(mask) > 0
    if not (pred.shape == truth.shape == mask.shape):
        raise DataError(f"shape mismatch: pred {pred.shape}, truth {truth.shape}, mask {mask.shape}")
    if not mask.any():
        raise DataError("metric mask is empty")
    return pred, truth, mask


def masked_mse(pred, truth, mask) -> float:
    pred, truth, mask = _masked_pair(pred, truth, mask)
    return float(np.mean((pred[mask] - truth[mask]) ** 2))


def psnr_from_mse(mse: float, peak: float = 1.0) -> float:
    if mse < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(peak**2 / mse))


def masked_psnr(pred, truth, mask, peak: float = 1.0) -> float:
    return psnr_from_mse(masked_mse(pred, truth, mask), peak)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _local_mean(a, g):
    for axis in range(a.ndim):
        a = ndimage.correlate1d(a, g, axis=axis, mode="constant")
    return a


def ssim_components(pred, truth, data_range: float = 1.0):
    """Luminance and contrast-structure maps of Gaussian-windowed 3D SSIM.

    Only entries whose window lies fully inside the volume are meaningful;
    see :func:`valid_centers`.
    """
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    g = gaussian_window()
    mx, my = _local_mean(x, g), _local_mean(y, g)
    vx = _local_mean(x * x, g) - mx * mx
    vy = _local_mean(y * y, g) - my * my
    cov = _local_mean(x * y, g) - mx * my
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    luminance = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    contrast_structure = (2 * cov + c2) / (vx + vy + c2)
    return luminance, contrast_structure


def valid_centers(shape, size: int = SSIM_WINDOW) -> np.ndarray:
    r = size // 2
    valid = np.zeros(shape, dtype=bool)
    valid[tuple(slice(r, s - r) for s in shape)] = True
    return valid


def masked_ssim(pred, truth, mask, data_range: float = 1.0) -> float:
    """Mean SSIM over 7x7x7 windows centred on mask voxels.

    Windows must fit inside the volume; an error is raised if no mask voxel
    can host one.
    """
    pred, truth, mask = _masked_pair(pred, truth, mask)
    centers = mask & valid_centers(mask.shape)
    if not centers.any():
        raise DataError("mask has no voxel far enough from the border to centre an SSIM window")
    lum, cs = ssim_components(pred, truth, data_range)
    return float(np.mean((lum * cs)[centers]))


def dice(labels_a, labels_b, class_id: int, mask=None) -> float:
    a = np.asarray(labels_a) == class_id
    b = np.asarray(labels_b) == class_id
    if a.shape != b.shape:
        raise DataError(f"label grids differ in shape: {a.shape} vs {b.shape}")
    if mask is not None:
        m = np.asarray(mask) > 0
        a, b = a & m, b & m
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def threshold_segment(volume) -> np.ndarray:
    """Tissue labels by thresholding at midpoints between phantom tissue means."""
    a = np.asarray(volume)
    t_csf_gm = 0.5 * (TISSUE_INTENSITY[CSF] + TISSUE_INTENSITY[GM])
    t_gm_wm = 0.5 * (TISSUE_INTENSITY[GM] + TISSUE_INTENSITY[WM])
    labels = np.full(a.shape, CSF, dtype=np.uint8)
    labels[a >= t_csf_gm] = GM
    labels[a >= t_gm_wm] = WM
    labels[a == 0] = 0
    return labels


@dataclass
class MetricsReport:
    records: list
    aggregate: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "version": REPORT_VERSION,
            "fields": list(REPORT_FIELDS),
            "records": self.records,
            "aggregate": self.aggregate,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def from_dict(cls, doc) -> "MetricsReport":
        if doc.get("format") != REPORT_FORMAT:
            raise DataError("not a metrics report")
        if doc.get("version") != REPORT_VERSION:
            raise DataError(f"unsupported metrics report version {doc.get('version')}")
        return cls(doc["records"], doc["aggregate"])

    @classmethod
    def load(cls, path) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def aggregate(records) -> dict:
    """Mean and sample standard deviation (0 for a single row) per metric."""
    out = {}
    for key in REPORT_FIELDS[1:]:
        vals = [r[key] for r in records if r.get(key) is not None]
        if not vals:
            continue
        arr = np.asarray(vals, dtype=np.float64)
        std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
        out[key] = {"mean": float(arr.mean()), "std": std, "n": len(arr)}
    return out


def evaluate_volume(pred, truth, mask, truth_labels=None, pred_labels=None, name="", peak=1.0) -> dict:
    mse = masked_mse(pred, truth, mask)
    rec = {
        "name": name,
        "masked_mse": mse,
        "masked_psnr": psnr_from_mse(mse, peak),
        "masked_ssim": masked_ssim(pred, truth, mask, data_range=peak),
    }
    if truth_labels is not None:
        if pred_labels is None:
            pred_labels = threshold_segment(pred)
        for tissue, cid in TISSUE_CLASSES.items():
            rec[f"dice_{tissue}"] = dice(pred_labels, truth_labels, cid, mask)
    return rec


def evaluate_suite(preds, truths, masks, truth_labels=None, names=None, peak=1.0) -> MetricsReport:
    """Per-volume masked metrics plus mean +/- std.

    Dice needs ``truth_labels``; predicted labels come from
    :func:`threshold_segment`.
    """
    n = len(preds)
    if len(truths) != n or len(masks) != n or (truth_labels is not None and len(truth_labels) != n):
        raise DataError("prediction, truth, mask and label collections differ in length")
    names = names or [f"volume_{i:03d}" for i in range(n)]
    records = [
        evaluate_volume(preds[i], truths[i], masks[i], None if truth_labels is None else truth_labels[i], name=names[i], peak=peak)
        for i in range(n)
    ]
    return MetricsReport(records, aggregate(records))


def residual_error_reduction(dice_with: float, dice_without: float) -> float:
    """Relative drop in segmentation error, 1 - (1 - d_with) / (1 - d_without)."""
    return 1.0 - (1.0 - dice_with) / (1.0 - dice_without)


def ablation_table(report_without: MetricsReport, report_with: MetricsReport) -> dict:
    """Mean Dice per tissue with and without the module, plus error reduction."""
    table = {"without": {}, "with": {}, "error_reduction": {}}
    for tissue in TISSUE_CLASSES:
        key = f"dice_{tissue}"
        d0 = report_without.aggregate[key]["mean"]
        d1 = report_with.aggregate[key]["mean"]
        table["without"][tissue] = d0
        table["with"][tissue] = d1
        table["error_reduction"][tissue] = residual_error_reduction(d1, d0) if d0 < 1.0 else 0.0
    return table


def mean_fill(volume, mask) -> np.ndarray:
    """Baseline: fill the mask with the mean of nonzero voxels outside it."""
    a = np.asarray(volume)
    m = np.asarray(mask) > 0
    ref = a[(~m) & (a != 0)]
    fill = ref.mean() if ref.size else 0.0
    return np.where(m, np.asarray(fill, dtype=a.dtype), a)
