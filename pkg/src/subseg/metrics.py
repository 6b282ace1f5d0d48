"""Segmentation quality metrics: Dice, Jaccard, 95th-percentile Hausdorff.

All metrics are per class on integer label maps. Conventions:
  - a class absent from both maps scores dice = jaccard = 1 (nothing to get
    wrong); absent from exactly one scores 0;
  - hd95 is undefined (nan) when either mask is empty, and nan values are
    excluded from averages;
  - the headline means aggregate foreground classes only (background dice is
    uninformative when background dominates the image).
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "dice_jaccard",
    "boundary_pixels",
    "hd95",
    "evaluate_segmentation",
]


def dice_jaccard(pred, ref, num_classes):
    """Per-class (dice, jaccard) arrays for two label maps."""
    pred = np.asarray(pred)
    ref = np.asarray(ref)
    if pred.shape != ref.shape:
        raise ValueError(
            "shape mismatch: {} vs {}".format(pred.shape, ref.shape))
    dice = np.zeros(num_classes)
    jacc = np.zeros(num_classes)
    for c in range(num_classes):
        p = pred == c
        r = ref == c
        np_, nr = int(p.sum()), int(r.sum())
        if np_ == 0 and nr == 0:
            dice[c] = jacc[c] = 1.0
            continue
        inter = int(np.sum(p & r))
        union = np_ + nr - inter
        dice[c] = 2.0 * inter / (np_ + nr)
        jacc[c] = inter / union
    return dice, jacc


def boundary_pixels(mask):
    """Boundary of a binary mask: mask pixels with a non-mask 8-neighbor.

    Everything outside the image counts as background, so mask pixels on the
    image edge are boundary.
    """
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = np.ones_like(mask)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            interior &= padded[1 + di:1 + di + mask.shape[0],
                               1 + dj:1 + dj + mask.shape[1]]
    return mask & ~interior


def _directed_percentile(src, dst, q=0.95):
    """q-th percentile (nearest rank) of nearest-neighbor distances src->dst."""
    diff = src[:, None, :] - dst[None, :, :]
    nearest = np.sqrt(np.min(np.sum(diff * diff, axis=2), axis=1))
    nearest.sort()
    idx = int(np.ceil(q * nearest.size)) - 1
    return float(nearest[idx])


def hd95(pred_mask, ref_mask):
    """Symmetric 95th-percentile Hausdorff distance between mask boundaries.

    Returns nan when either mask is empty. Brute-force all-pairs distances;
    fine at these image sizes.
    """
    pred_mask = np.asarray(pred_mask, dtype=bool)
    ref_mask = np.asarray(ref_mask, dtype=bool)
    if pred_mask.shape != ref_mask.shape:
        raise ValueError(
            "shape mismatch: {} vs {}".format(pred_mask.shape, ref_mask.shape))
    if not pred_mask.any() or not ref_mask.any():
        return float("nan")
    bp = np.argwhere(boundary_pixels(pred_mask)).astype(np.float64)
    br = np.argwhere(boundary_pixels(ref_mask)).astype(np.float64)
    return max(_directed_percentile(bp, br), _directed_percentile(br, bp))


def evaluate_segmentation(preds, refs, num_classes):
    """Macro-averaged metrics over a list of (pred, ref) label-map pairs.

    Averaging order: per image per class, then across images, then across
    foreground classes for the headline means. hd95 nan entries (empty
    masks) are dropped from averages.
    """
    if len(preds) != len(refs) or not preds:
        raise ValueError("need equal-length nonempty prediction/reference lists")
    n = len(preds)
    dice_acc = np.zeros((n, num_classes))
    jacc_acc = np.zeros((n, num_classes))
    hd_acc = np.full((n, num_classes), np.nan)
    for i, (p, r) in enumerate(zip(preds, refs)):
        d, j = dice_jaccard(p, r, num_classes)
        dice_acc[i] = d
        jacc_acc[i] = j
        for c in range(num_classes):
            hd_acc[i, c] = hd95(p == c, r == c)

    per_class_dice = dice_acc.mean(axis=0)
    per_class_jacc = jacc_acc.mean(axis=0)
    per_class_hd = np.array([_finite_mean(hd_acc[:, c]) for c in range(num_classes)])

    fg = slice(1, num_classes)
    return {
        "per_class_dice": per_class_dice.tolist(),
        "per_class_jaccard": per_class_jacc.tolist(),
        "per_class_hd95": per_class_hd.tolist(),
        "mean_dice": float(per_class_dice[fg].mean()),
        "mean_jaccard": float(per_class_jacc[fg].mean()),
        "mean_hd95": _finite_mean(per_class_hd[fg]),
        "n_images": n,
    }


def _finite_mean(values):
    finite = values[np.isfinite(values)]
    return float(finite.mean()) if finite.size else float("nan")
