"""Scikit-learn style facade over the trainer.

X holds grayscale images, y holds integer label maps; an image whose whole
map equals -1 counts as unlabeled and feeds only the consistency and
contrastive terms. Maps must be all-labeled or all -1 per image.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from subseg.data import Sample
from subseg.metrics import evaluate_segmentation
from subseg.nets import forward
from subseg.train import TrainConfig, Trainer, predict_batches

UNLABELED = -1


class PixelContrastSegmenter(BaseEstimator):
    """Semi-supervised pixel segmenter trained with subclass contrast."""

    def __init__(self, steps=200, lr=0.05, momentum=0.9, ema_decay=0.999,
                 temperature=0.5, hard_threshold=0.75, reliable_threshold=0.95,
                 unsup_weight=0.3, contrast_weight=0.1, boundary_mix_max=0.1,
                 boundary_mix_ramp_steps: Optional[int] = None, k_anchor=32,
                 k_pos=8, k_neg=64, bank_capacity=256, boundary_thickness=1,
                 embed_dim=32, batch_labeled=4, batch_unlabeled=4,
                 use_unsup=True, use_icl=True, use_bcl=True,
                 sibling_mode="unconcerned", exclude_background=True,
                 boundary_objective="subclass",
                 num_classes: Optional[int] = None, random_state=0):
        self.steps = steps
        self.lr = lr
        self.momentum = momentum
        self.ema_decay = ema_decay
        self.temperature = temperature
        self.hard_threshold = hard_threshold
        self.reliable_threshold = reliable_threshold
        self.unsup_weight = unsup_weight
        self.contrast_weight = contrast_weight
        self.boundary_mix_max = boundary_mix_max
        self.boundary_mix_ramp_steps = boundary_mix_ramp_steps
        self.k_anchor = k_anchor
        self.k_pos = k_pos
        self.k_neg = k_neg
        self.bank_capacity = bank_capacity
        self.boundary_thickness = boundary_thickness
        self.embed_dim = embed_dim
        self.batch_labeled = batch_labeled
        self.batch_unlabeled = batch_unlabeled
        self.use_unsup = use_unsup
        self.use_icl = use_icl
        self.use_bcl = use_bcl
        self.sibling_mode = sibling_mode
        self.exclude_background = exclude_background
        self.boundary_objective = boundary_objective
        self.num_classes = num_classes
        self.random_state = random_state

    # ------------------------------------------------------------------
    def _config(self) -> TrainConfig:
        return TrainConfig(
            steps=self.steps, lr=self.lr, momentum=self.momentum,
            ema_decay=self.ema_decay, temperature=self.temperature,
            hard_threshold=self.hard_threshold,
            reliable_threshold=self.reliable_threshold,
            unsup_weight=self.unsup_weight,
            contrast_weight=self.contrast_weight,
            boundary_mix_max=self.boundary_mix_max,
            boundary_mix_ramp_steps=self.boundary_mix_ramp_steps,
            k_anchor=self.k_anchor, k_pos=self.k_pos, k_neg=self.k_neg,
            bank_capacity=self.bank_capacity,
            boundary_thickness=self.boundary_thickness,
            embed_dim=self.embed_dim, batch_labeled=self.batch_labeled,
            batch_unlabeled=self.batch_unlabeled, use_unsup=self.use_unsup,
            use_icl=self.use_icl, use_bcl=self.use_bcl,
            sibling_mode=self.sibling_mode,
            exclude_background=self.exclude_background,
            boundary_objective=self.boundary_objective,
            seed=self.random_state)

    @staticmethod
    def _check_images(X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 4 and X.shape[1] == 1:
            X = X[:, 0]
        if X.ndim != 3:
            raise ValueError(
                "X must be [n_images, H, W] or [n_images, 1, H, W], "
                "got shape {}".format(X.shape))
        if X.shape[0] == 0:
            raise ValueError("X holds no images")
        if not np.all(np.isfinite(X)):
            raise ValueError("X contains non-finite values")
        if X.min() < 0.0 or X.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        if X.shape[1] % 4 or X.shape[2] % 4:
            raise ValueError("H and W must be divisible by 4")
        return X

    def fit(self, X, y):
        X = self._check_images(X)
        y = np.asarray(y)
        if y.shape != X.shape:
            raise ValueError("y shape {} must match X image shape {}".format(
                y.shape, X.shape))
        if not np.issubdtype(y.dtype, np.integer):
            raise ValueError("y must hold integer class ids (-1 for unlabeled)")

        has_unlabeled_px = (y == UNLABELED).any(axis=(1, 2))
        fully_unlabeled = (y == UNLABELED).all(axis=(1, 2))
        if np.any(has_unlabeled_px & ~fully_unlabeled):
            raise ValueError("per-image maps must be fully labeled or all -1")
        labels_seen = y[~has_unlabeled_px]
        if labels_seen.size == 0:
            raise ValueError("need at least one labeled image")
        n_classes = self.num_classes or max(2, int(labels_seen.max()) + 1)
        if labels_seen.max() >= n_classes:
            raise ValueError("label {} exceeds num_classes={}".format(
                int(labels_seen.max()), n_classes))

        labeled, unlabeled = [], []
        for i in range(len(X)):
            if fully_unlabeled[i]:
                unlabeled.append(Sample(X[i][None], None,
                                        "fit-{:04d}".format(i), n_classes))
            else:
                labeled.append(Sample(X[i][None], y[i],
                                      "fit-{:04d}".format(i), n_classes))

        trainer = Trainer(self._config(), labeled, unlabeled, [])
        for step in range(self.steps):
            components = trainer.train_step(step)
        self.params_ = trainer.student
        self.teacher_params_ = trainer.teacher
        self.num_classes_ = n_classes
        self.classes_ = np.arange(n_classes)
        self.fitting_report_ = {
            "last_components": components,
            "audit": trainer.audit.summary(),
            "bank_sizes": trainer.banks.sizes(),
            "n_labeled": len(labeled),
            "n_unlabeled": len(unlabeled),
        }
        return self

    def _require_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError(
                "this PixelContrastSegmenter instance is not fitted yet")

    def predict(self, X) -> np.ndarray:
        self._require_fitted()
        X = self._check_images(X)
        preds = predict_batches(self.params_, [img[None] for img in X])
        return np.stack(preds)

    def predict_proba(self, X) -> np.ndarray:
        self._require_fitted()
        X = self._check_images(X)
        chunks = []
        for start in range(0, len(X), 8):
            out = forward(self.params_, X[start:start + 8][:, None])
            chunks.append(out.probabilities.data)
        return np.concatenate(chunks)

    def score(self, X, y) -> float:
        """Mean foreground Dice over the given labeled images."""
        self._require_fitted()
        y = np.asarray(y)
        preds = self.predict(X)
        scores = evaluate_segmentation(list(preds), list(y), self.num_classes_)
        return float(scores["mean_dice"])
