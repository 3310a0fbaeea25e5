"""Evaluation metrics: PSNR, SSIM, and mean IoU. Pure numpy, no gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

PSNR_CAP_DB = 100.0


def _check_range(name, x):
    if x.min() < 0.0 or x.max() > 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got [{x.min():.4g}, {x.max():.4g}]")


def psnr(a, b):
    """10*log10(1/MSE) on [0,1]-scaled images, capped at 100 dB."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    _check_range("first image", a)
    _check_range("second image", b)
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def psnr_masked(a, b, mask):
    """PSNR restricted to pixels where mask == 1 (hole region)."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    sel = np.broadcast_to(np.asarray(mask, bool), a.shape)
    if not sel.any():
        raise ValueError("mask selects no pixels")
    _check_range("first image", a)
    _check_range("second image", b)
    mse = np.mean((a[sel] - b[sel]) ** 2)
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size=11, sigma=1.5):
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def _local_means(img, kernel):
    size = kernel.shape[0]
    windows = np.lib.stride_tricks.sliding_window_view(img, (size, size))
    return np.einsum("ijkl,kl->ij", windows, kernel)


def ssim(a, b, window_size=11, sigma=1.5, k1=0.01, k2=0.03, uniform=False):
    """Mean local structural similarity over valid (fully inside) windows.

    Multi-channel inputs (C,H,W) are scored per channel and averaged.
    `uniform=True` swaps the Gaussian for an equal-weight window.
    """
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 3:
        return float(np.mean([ssim(a[c], b[c], window_size, sigma, k1, k2, uniform)
                              for c in range(a.shape[0])]))
    if a.ndim != 2:
        raise ValueError(f"expected HxW or CxHxW image, got {a.ndim} dims")
    if min(a.shape) < window_size:
        raise ValueError(f"image {a.shape} smaller than {window_size}x{window_size} window")
    if uniform:
        kernel = np.full((window_size, window_size), 1.0 / window_size**2)
    else:
        kernel = gaussian_window(window_size, sigma)
    c1, c2 = (k1 * 1.0) ** 2, (k2 * 1.0) ** 2
    mu_a = _local_means(a, kernel)
    mu_b = _local_means(b, kernel)
    var_a = _local_means(a * a, kernel) - mu_a**2
    var_b = _local_means(b * b, kernel) - mu_b**2
    cov = _local_means(a * b, kernel) - mu_a * mu_b
    score = (((2 * mu_a * mu_b + c1) * (2 * cov + c2))
             / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)))
    return float(score.mean())


def miou(pred, gt, k_classes):
    """Mean IoU over classes that appear in prediction or ground truth.

    Classes absent from both are skipped (their entry in the per-class
    list is NaN), so an unused label id cannot dilute the mean.
    """
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    for name, lab in (("pred", pred), ("gt", gt)):
        if lab.min() < 0 or lab.max() >= k_classes:
            raise ValueError(f"{name} labels outside [0, {k_classes}): "
                             f"[{lab.min()}, {lab.max()}]")
    per_class = []
    for k in range(k_classes):
        p, g = pred == k, gt == k
        union = np.count_nonzero(p | g)
        if union == 0:
            per_class.append(float("nan"))
        else:
            per_class.append(np.count_nonzero(p & g) / union)
    present = [v for v in per_class if not math.isnan(v)]
    return float(np.mean(present)), per_class


@dataclass
class EvalReport:
    psnr: float
    psnr_hole: float
    ssim: float
    miou: float
    per_class_iou: list = field(default_factory=list)
    samples: int = 0

    def to_text(self):
        lines = [
            f"samples = {self.samples}",
            f"psnr = {self.psnr:.6f}",
            f"psnr_hole = {self.psnr_hole:.6f}",
            f"ssim = {self.ssim:.6f}",
            f"miou = {self.miou:.6f}",
        ]
        for k, v in enumerate(self.per_class_iou):
            lines.append(f"iou_class_{k} = {'nan' if math.isnan(v) else f'{v:.6f}'}")
        return "\n".join(lines) + "\n"

    CSV_HEADER = "samples,psnr,psnr_hole,ssim,miou"

    def to_csv_row(self):
        return (f"{self.samples},{self.psnr:.6f},{self.psnr_hole:.6f},"
                f"{self.ssim:.6f},{self.miou:.6f}")
