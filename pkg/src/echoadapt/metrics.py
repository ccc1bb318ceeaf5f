"""Segmentation-overlap and image-distribution metrics.

Dice scores are pooled over the whole evaluation set (confusion totals are
accumulated across images, then turned into scores) rather than averaged
per image. Distribution distance uses a Frechet form over a fixed
hand-crafted feature embedding, so no pretrained feature network is needed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

from .errors import DimensionMismatch, EmptyInput, ShapeMismatch
from .remap import LabelSpace

# --- pooled Dice ---------------------------------------------------------------


class ConfusionTotals:
    """Per-class TP/FP/FN pooled across every mask pair seen so far."""

    def __init__(self, space: LabelSpace):
        self.space = space
        n = len(space.classes)
        self.tp = np.zeros(n, dtype=np.int64)
        self.fp = np.zeros(n, dtype=np.int64)
        self.fn = np.zeros(n, dtype=np.int64)
        self.pairs = 0

    def update(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionTotals":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ShapeMismatch(f"prediction {pred.shape} vs ground truth {gt.shape}")
        for i, (cid, _) in enumerate(self.space.classes):
            p = pred == cid
            g = gt == cid
            self.tp[i] += np.count_nonzero(p & g)
            self.fp[i] += np.count_nonzero(p & ~g)
            self.fn[i] += np.count_nonzero(~p & g)
        self.pairs += 1
        return self

    @property
    def gt_pixels(self) -> np.ndarray:
        return self.tp + self.fn


def global_dice(totals: ConfusionTotals) -> float:
    """2*TP / (2*TP + FP + FN) with all foreground classes pooled together."""
    num = 2.0 * totals.tp.sum()
    den = num + totals.fp.sum() + totals.fn.sum()
    if den == 0:  # no foreground anywhere, and none predicted: perfect agreement
        return 1.0
    return float(num / den)


def per_class_dice(totals: ConfusionTotals) -> dict[str, float | None]:
    """Pooled Dice per class, in the label space's declared order.

    A class absent from the ground truth and never predicted has no
    defined score and maps to None.
    """
    out: dict[str, float | None] = {}
    for i, (_, name) in enumerate(totals.space.classes):
        den = 2.0 * totals.tp[i] + totals.fp[i] + totals.fn[i]
        out[name] = None if den == 0 else float(2.0 * totals.tp[i] / den)
    return out


def class_weighted_dice(totals: ConfusionTotals) -> float:
    """Per-class Dice averaged with weights = ground-truth pixel share."""
    gt = totals.gt_pixels.astype(np.float64)
    total_gt = gt.sum()
    if total_gt == 0:
        return 1.0 if totals.fp.sum() == 0 else 0.0
    score = 0.0
    for i in range(len(totals.space.classes)):
        den = 2.0 * totals.tp[i] + totals.fp[i] + totals.fn[i]
        if den == 0:
            continue  # weight is zero anyway
        score += (gt[i] / total_gt) * (2.0 * totals.tp[i] / den)
    return float(score)


def dice_report(totals: ConfusionTotals) -> dict:
    return {
        "global": global_dice(totals),
        "class_weighted": class_weighted_dice(totals),
        "per_class": per_class_dice(totals),
        "pairs": totals.pairs,
    }


# --- SSIM ----------------------------------------------------------------------


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def ssim(
    a: np.ndarray,
    b: np.ndarray,
    data_range: float = 1.0,
    window_size: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Mean structural similarity over valid (fully interior) windows."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeMismatch(f"need matching 2-d images, got {a.shape} and {b.shape}")
    if min(a.shape) < window_size:
        raise ShapeMismatch(f"images smaller than the {window_size}x{window_size} window")
    kernel = _gaussian_kernel(window_size, sigma)
    mu_a = convolve2d(a, kernel, mode="valid")
    mu_b = convolve2d(b, kernel, mode="valid")
    var_a = convolve2d(a * a, kernel, mode="valid") - mu_a**2
    var_b = convolve2d(b * b, kernel, mode="valid") - mu_b**2
    cov = convolve2d(a * b, kernel, mode="valid") - mu_a * mu_b
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def mean_ssim(images_a, images_b, data_range: float = 1.0) -> float:
    pairs = list(zip(images_a, images_b, strict=True))
    if not pairs:
        raise EmptyInput("no image pairs to compare")
    return float(np.mean([ssim(a, b, data_range=data_range) for a, b in pairs]))


# --- Frechet distance over hand-crafted features --------------------------------

FEATURE_BANDS = 4
GRADIENT_BINS = 6
FEATURE_DIM = 2 + FEATURE_BANDS * (2 + GRADIENT_BINS)

_GRADIENT_EDGES = np.linspace(0.0, 1.0, GRADIENT_BINS + 1)


def extract_features(images: np.ndarray) -> np.ndarray:
    """Fixed per-image descriptor: global moments plus banded statistics.

    Expects (n, H, W) arrays with intensities in [0, 1]. Each of four
    horizontal bands contributes its mean, standard deviation, and a
    6-bin gradient-magnitude histogram (fractions of band pixels); two
    global moments complete the vector.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    if images.ndim != 3:
        raise ShapeMismatch(f"expected (n, H, W), got {images.shape}")
    n, h, w = images.shape
    if h < FEATURE_BANDS:
        raise ShapeMismatch(f"images need at least {FEATURE_BANDS} rows")
    feats = np.empty((n, FEATURE_DIM), dtype=np.float64)
    band_edges = np.linspace(0, h, FEATURE_BANDS + 1).astype(int)
    for i, img in enumerate(images):
        gy, gx = np.gradient(img)
        mag = np.clip(np.hypot(gy, gx), 0.0, _GRADIENT_EDGES[-1])
        row = [img.mean(), img.std()]
        for b in range(FEATURE_BANDS):
            band = img[band_edges[b] : band_edges[b + 1]]
            band_mag = mag[band_edges[b] : band_edges[b + 1]]
            hist, _ = np.histogram(band_mag, bins=_GRADIENT_EDGES)
            row.extend([band.mean(), band.std()])
            row.extend(hist / band_mag.size)
        feats[i] = row
    return feats


@dataclass(frozen=True)
class EmbeddingStats:
    """Mean and covariance of a feature set."""

    mean: np.ndarray
    cov: np.ndarray
    count: int

    @classmethod
    def from_features(cls, features: np.ndarray) -> "EmbeddingStats":
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2:
            raise ShapeMismatch(f"expected (n, d) features, got {features.shape}")
        if features.shape[0] < 2:
            raise EmptyInput("need at least two samples to estimate covariance")
        mean = features.mean(axis=0)
        cov = np.cov(features, rowvar=False, ddof=1)
        cov = np.atleast_2d(cov)
        return cls(mean=mean, cov=cov, count=features.shape[0])


def _psd_root(matrix: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((matrix + matrix.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: EmbeddingStats, b: EmbeddingStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a^{1/2} S_b S_a^{1/2})^{1/2})."""
    if a.mean.shape != b.mean.shape:
        raise DimensionMismatch(f"feature dims differ: {a.mean.shape} vs {b.mean.shape}")
    diff = a.mean - b.mean
    root_a = _psd_root(a.cov)
    inner = root_a @ b.cov @ root_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    trace_sqrt = np.sum(np.sqrt(np.clip(vals, 0.0, None)))
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * trace_sqrt)
    return max(value, 0.0)


def frechet_from_images(images_a: np.ndarray, images_b: np.ndarray) -> float:
    stats_a = EmbeddingStats.from_features(extract_features(images_a))
    stats_b = EmbeddingStats.from_features(extract_features(images_b))
    return frechet_distance(stats_a, stats_b)
