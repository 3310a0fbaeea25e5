"""Training objectives.

Reconstruction is weighted L1 split over hole/valid regions plus a
total-variation smoothness term on the composited image around the hole;
the edge branch trains with BCE plus a hinge adversary; the segmentation
branch with per-pixel cross-entropy. `total_loss` composes them:

    total = inpt + edge_w * (bce_w * bce + adv) + seg_w * seg
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BCE_EPS = 1e-7


@dataclass
class LossReport:
    """Per-step scalar summary of every objective component."""

    total: float
    inpt: float
    edge_bce: float
    edge_adv: float
    seg: float
    disc: float

    FIELDS = ("total", "inpt", "edge_bce", "edge_adv", "seg", "disc")

    def values(self):
        return tuple(getattr(self, f) for f in self.FIELDS)

    def finite(self):
        return all(np.isfinite(v) for v in self.values())


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _require_binary(mask, name="mask"):
    d = _data(mask)
    if not np.all((d == 0.0) | (d == 1.0)):
        raise ValueError(f"{name} must be binary")
    return d


def dilate_mask(mask, pixels=1):
    """Binary dilation of an (N,1,H,W) array by a square element."""
    m = np.asarray(mask)
    for _ in range(pixels):
        p = np.pad(m, ((0, 0), (0, 0), (1, 1), (1, 1)))
        h, w = m.shape[2], m.shape[3]
        out = m.copy()
        for di in range(3):
            for dj in range(3):
                np.maximum(out, p[:, :, di:di + h, dj:dj + w], out=out)
        m = out
    return m


def tv_loss(image, region):
    """Anisotropic total variation counted over adjacent pixel pairs whose
    endpoints both lie in `region` (N,1,H,W binary), normalized by the full
    element count of `image`."""
    n, c, h, w = image.shape
    dtype = image.data.dtype
    pair_h = Tensor((region[:, :, :, 1:] * region[:, :, :, :-1]).astype(dtype))
    pair_v = Tensor((region[:, :, 1:, :] * region[:, :, :-1, :]).astype(dtype))
    dh = ad.narrow(image, 3, 1, w - 1) - ad.narrow(image, 3, 0, w - 1)
    dv = ad.narrow(image, 2, 1, h - 1) - ad.narrow(image, 2, 0, h - 1)
    tv = ad.sum_(ad.absolute(dh) * pair_h) + ad.sum_(ad.absolute(dv) * pair_v)
    return tv * (1.0 / image.data.size)


def inpaint_loss(pred, target, mask, weights):
    """hole-weighted + valid-weighted L1 on the raw prediction, plus TV of
    the composite over a 1-pixel dilation of the hole."""
    m = _require_binary(mask)
    mask_t = mask if isinstance(mask, Tensor) else Tensor(m)
    inv_t = Tensor((1.0 - m).astype(pred.data.dtype))
    diff = pred - target
    loss = (weights.hole * ad.mean(ad.absolute(diff * mask_t))
            + weights.valid * ad.mean(ad.absolute(diff * inv_t)))
    if weights.tv:
        comp = target * inv_t + pred * mask_t
        loss = loss + weights.tv * tv_loss(comp, dilate_mask(m))
    return loss


def edge_bce(pred, gt):
    """Mean binary cross-entropy; probabilities clamped to [eps, 1-eps]."""
    g = _require_binary(gt, "edge target")
    d = pred.data
    if d.min() < 0.0 or d.max() > 1.0:
        raise ValueError("edge probabilities must lie in [0, 1]")
    p = ad.clamp(pred, BCE_EPS, 1.0 - BCE_EPS)
    gt_t = Tensor(g.astype(d.dtype))
    inv_t = Tensor((1.0 - g).astype(d.dtype))
    return -ad.mean(gt_t * ad.log(p) + inv_t * ad.log(1.0 - p))


def edge_adv_g(pred_edge, disc):
    """Generator adversarial term: -E[D(pred)]."""
    return -ad.mean(disc(pred_edge))


def edge_adv_d(pred_edge, real_edge, disc, update=False):
    """Hinge discriminator objective; the prediction is detached so no
    gradient reaches the generator. `update` refreshes the spectral-norm
    power iterates during the real pass."""
    real = disc(real_edge, update=update)
    fake = disc(pred_edge.detach())
    return ad.mean(ad.relu(1.0 - real)) + ad.mean(ad.relu(1.0 + fake))


def seg_ce(logits, labels):
    """Mean softmax cross-entropy over pixels; labels are class indices."""
    n, k, h, w = logits.shape
    lab = _data(labels).reshape(n, h, w).astype(np.int64)
    if lab.min() < 0 or lab.max() >= k:
        raise ValueError(f"class index out of range for {k} classes")
    logp = ad.log_softmax(logits, axis=1)
    onehot = np.zeros(logits.shape, dtype=logits.data.dtype)
    np.put_along_axis(onehot, lab[:, None], 1.0, axis=1)
    return -ad.sum_(Tensor(onehot) * logp) * (1.0 / (n * h * w))


def total_loss(inpt, bce, adv, seg, weights):
    """Weighted composition; pass None for the terms of a disabled branch."""
    weights.validate()
    total = inpt
    if bce is not None:
        edge = weights.bce_in_edge * bce
        edge = edge + adv if adv is not None else edge
        total = total + weights.edge * edge
    elif adv is not None:
        total = total + weights.edge * adv
    if seg is not None:
        total = total + weights.seg * seg
    return total
