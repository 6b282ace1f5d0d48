"""Training objectives.

Four parts feed one unified loss:
  - supervised: (cross-entropy + soft Dice) / 2 on labeled images;
  - unsupervised: soft Dice against teacher pseudo-labels, restricted to
    pixels where the teacher is confident;
  - inner contrastive: InfoNCE over inner-region anchors vs bank vectors;
  - boundary contrastive: a smooth margin-free objective
    log(1 + sum_p e^{-pos_sim} * sum_n e^{neg_sim}) over boundary anchors.
    Unlike InfoNCE it has no temperature, and its gradient magnitude on the
    positive pair shrinks relative to the negative one as similarities grow.

Total: L = sup + unsup_weight * unsup + contrast_weight *
           ((1 - alpha) * inner + alpha * boundary),
with alpha ramped linearly from 0 to boundary_mix_max.
"""

from __future__ import annotations

import numpy as np

from subseg import autodiff as ad
from subseg.boundaries import is_boundary_subclass

__all__ = [
    "LossConfig",
    "icl_from_sims",
    "icl_loss",
    "icl_lower_bound",
    "bcl_from_sims",
    "bcl_loss",
    "bcl_similarity_grads",
    "softmax_cross_entropy",
    "soft_dice_loss",
    "supervised_loss",
    "unsupervised_loss",
    "alpha_schedule",
    "unified_loss",
]

EPS = 1e-6  # soft-Dice smoothing


class LossConfig:
    """Weights and thresholds of the unified objective."""

    def __init__(self, temperature=0.5, unsup_weight=0.3, contrast_weight=0.1,
                 boundary_mix_max=0.1, boundary_mix_ramp_steps=800,
                 reliable_threshold=0.95):
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        if unsup_weight < 0 or contrast_weight < 0:
            raise ValueError("loss weights must be nonnegative")
        if not 0.0 <= boundary_mix_max <= 1.0:
            raise ValueError("boundary_mix_max must lie in [0, 1]")
        self.temperature = float(temperature)
        self.unsup_weight = float(unsup_weight)
        self.contrast_weight = float(contrast_weight)
        self.boundary_mix_max = float(boundary_mix_max)
        self.boundary_mix_ramp_steps = int(boundary_mix_ramp_steps)
        self.reliable_threshold = float(reliable_threshold)


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise FloatingPointError("non-finite similarity in contrastive loss")


def _sims(anchors, i, vectors):
    """Taped similarities between anchor i and a constant [M, D] matrix."""
    a = anchors.anchor_embedding(i)
    return ad.matmul(ad.Tensor(vectors), a)


def icl_from_sims(pos_sims, neg_sims, temperature):
    """InfoNCE for one anchor from taped similarity vectors.

    mean over positives of -log( e^{yp/t} / (e^{yp/t} + sum_n e^{yn/t}) ).
    An empty negative set makes every term exactly zero.
    """
    _check_finite(pos_sims.data, neg_sims.data)
    inv_t = 1.0 / temperature
    scaled_pos = ad.scalar_mul(pos_sims, inv_t)
    if neg_sims.data.size:
        neg_total = ad.tsum(ad.exp(ad.scalar_mul(neg_sims, inv_t)))
        denom = ad.add(ad.exp(scaled_pos), neg_total)
    else:
        denom = ad.exp(scaled_pos)
    return ad.tmean(ad.sub(ad.log(denom), scaled_pos))


def icl_loss(anchors, entries, temperature, boundary=False):
    """Mean InfoNCE over one region's anchors of a drawn batch.

    By default averages over inner-region anchors; with boundary=True it
    averages over boundary-region anchors instead (used when the boundary
    objective is swapped to InfoNCE for comparison runs).
    """
    terms = []
    for entry in entries:
        if is_boundary_subclass(entry.subclass_id) != boundary:
            continue
        pos = _sims(anchors, entry.anchor_row, entry.positives)
        neg = _sims(anchors, entry.anchor_row, entry.negatives)
        terms.append(icl_from_sims(pos, neg, temperature))
    if not terms:
        return ad.Tensor(0.0)
    return ad.tmean(ad.stack_scalars(terms))


def icl_lower_bound(pos_sim, neg_sims, temperature):
    """(single-anchor loss, Jensen lower bound) as plain floats.

    loss = -yp/t + log(e^{yp/t} + sum e^{yn/t})
    bound = -yp/t + log|N| + mean(yn)/t
    The bound follows from Jensen on the log of the mean of exponentials,
    dropping the positive term inside the log.
    """
    neg_sims = np.asarray(neg_sims, dtype=np.float64)
    if neg_sims.size < 1:
        raise ValueError("need at least one negative similarity")
    t = float(temperature)
    loss = -pos_sim / t + np.log(np.exp(pos_sim / t) + np.sum(np.exp(neg_sims / t)))
    bound = -pos_sim / t + np.log(neg_sims.size) + np.mean(neg_sims) / t
    return float(loss), float(bound)


def bcl_from_sims(pos_sims, neg_sims):
    """Boundary loss for one anchor: log(1 + sum_p e^{-yp} * sum_n e^{yn})."""
    _check_finite(pos_sims.data, neg_sims.data)
    sr_pos = ad.tsum(ad.exp(ad.scalar_mul(pos_sims, -1.0)))
    sr_neg = ad.tsum(ad.exp(neg_sims))
    return ad.log(ad.add(ad.mul(sr_pos, sr_neg), 1.0))


def bcl_loss(anchors, entries):
    """Mean boundary loss over the boundary-region anchors of a drawn batch."""
    terms = []
    for entry in entries:
        if not is_boundary_subclass(entry.subclass_id):
            continue
        pos = _sims(anchors, entry.anchor_row, entry.positives)
        neg = _sims(anchors, entry.anchor_row, entry.negatives)
        terms.append(bcl_from_sims(pos, neg))
    if not terms:
        return ad.Tensor(0.0)
    return ad.tmean(ad.stack_scalars(terms))


def bcl_similarity_grads(pos_sims, neg_sims):
    """Closed-form boundary-loss gradients per similarity.

    dL/dyp_j = -sr_neg * e^{-yp_j} / (1 + sr_pos * sr_neg)
    dL/dyn_j = +sr_pos * e^{yn_j} / (1 + sr_pos * sr_neg)
    """
    pos_sims = np.asarray(pos_sims, dtype=np.float64)
    neg_sims = np.asarray(neg_sims, dtype=np.float64)
    if pos_sims.size == 0 or neg_sims.size == 0:
        raise ValueError("need nonempty similarity lists")
    sr_pos = np.sum(np.exp(-pos_sims))
    sr_neg = np.sum(np.exp(neg_sims))
    denom = 1.0 + sr_pos * sr_neg
    return (-sr_neg * np.exp(-pos_sims) / denom,
            sr_pos * np.exp(neg_sims) / denom)


def _one_hot(labels, num_classes):
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], num_classes) + labels.shape[1:])
    for c in range(num_classes):
        out[:, c] = labels == c
    return out


def _channel(probs, c):
    return ad.gather(probs, 1, [c])


def softmax_cross_entropy(probs, labels):
    """Mean per-pixel -log p[label]; probs [N, C, H, W], labels [N, H, W]."""
    n, num_classes, h, w = probs.shape
    labels = np.asarray(labels)
    flat = ad.reshape(probs, (probs.data.size,))
    pix = np.arange(n * h * w)
    img = pix // (h * w)
    rc = pix % (h * w)
    idx = (img * num_classes + labels.reshape(-1)) * h * w + rc
    picked = ad.gather(flat, 0, idx)
    return ad.scalar_mul(ad.tmean(ad.log(picked)), -1.0)


def soft_dice_loss(probs, labels, mask=None):
    """1 - mean per-class soft Dice; optional pixel mask restricts the sums."""
    n, num_classes, h, w = probs.shape
    target = _one_hot(labels, num_classes)
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64).reshape(n, 1, h, w)
        target = target * mask
    dice_terms = []
    for c in range(num_classes):
        pc = _channel(probs, c)
        if mask is not None:
            pc = ad.mul(pc, ad.Tensor(mask))
        tc = ad.Tensor(target[:, c:c + 1])
        inter = ad.tsum(ad.mul(pc, tc))
        total = ad.add(ad.tsum(pc), ad.tsum(tc))
        dice = ad.div(ad.add(ad.scalar_mul(inter, 2.0), EPS),
                      ad.add(total, EPS))
        dice_terms.append(dice)
    return ad.sub(ad.Tensor(1.0), ad.tmean(ad.stack_scalars(dice_terms)))


def supervised_loss(probs, labels):
    """(cross-entropy + soft Dice) / 2 on fully labeled images."""
    ce = softmax_cross_entropy(probs, labels)
    dice = soft_dice_loss(probs, labels)
    return ad.scalar_mul(ad.add(ce, dice), 0.5)


def unsupervised_loss(probs, pseudo_labels, teacher_conf, reliable_threshold):
    """Confidence-gated soft Dice against pseudo-labels; zero when no pixel
    clears the gate."""
    mask = np.asarray(teacher_conf) >= reliable_threshold
    if not mask.any():
        return ad.Tensor(0.0)
    return soft_dice_loss(probs, pseudo_labels, mask=mask.astype(np.float64))


def alpha_schedule(step, alpha_max, ramp_steps):
    """Linear 0 -> alpha_max over ramp_steps, flat afterwards."""
    if ramp_steps <= 0:
        return float(alpha_max)
    return float(alpha_max) * min(1.0, step / ramp_steps)


def unified_loss(sup, unsup, icl, bcl, cfg, step):
    """Weighted total plus a log of the scalar components.

    total = sup + unsup_weight * unsup
                + contrast_weight * ((1 - alpha) * icl + alpha * bcl)
    """
    alpha = alpha_schedule(step, cfg.boundary_mix_max, cfg.boundary_mix_ramp_steps)
    spcl = ad.add(ad.scalar_mul(icl, 1.0 - alpha), ad.scalar_mul(bcl, alpha))
    total = ad.add(ad.add(sup, ad.scalar_mul(unsup, cfg.unsup_weight)),
                   ad.scalar_mul(spcl, cfg.contrast_weight))
    components = {
        "sup": float(sup.data),
        "unsup": float(unsup.data),
        "icl": float(icl.data),
        "bcl": float(bcl.data),
        "alpha": alpha,
        "total": float(total.data),
    }
    return total, components
