"""Inner/boundary subclass division of label maps.

Every class c splits into two subclasses: inner pixels (id 2c) and boundary
pixels (id 2c+1), where a pixel is boundary when any pixel within Chebyshev
distance `thickness` carries a different label. Neighbors outside the image
do not count, so a uniform map has no boundary. Unlabeled pixels (IGNORE)
take no subclass and never induce boundaries in their neighbors.
"""

from __future__ import annotations

import numpy as np

IGNORE = -1

INNER = 0
BOUNDARY = 1

__all__ = [
    "IGNORE",
    "INNER",
    "BOUNDARY",
    "SubclassMap",
    "extract_boundaries",
    "SubclassRelation",
    "build_relation",
    "subclass_of",
    "class_of",
    "is_boundary_subclass",
]


def subclass_of(class_id, region):
    """Encode (class, region) as a subclass id: 2c inner, 2c+1 boundary."""
    return 2 * class_id + region


def class_of(subclass_id):
    return subclass_id // 2


def is_boundary_subclass(subclass_id):
    return subclass_id % 2 == 1


class SubclassMap:
    """Per-pixel class, region, and subclass ids for one label map."""

    def __init__(self, class_id, region, subclass_id, num_classes):
        self.class_id = class_id          # [H, W] int, IGNORE where unlabeled
        self.region = region              # [H, W] int: INNER/BOUNDARY, IGNORE
        self.subclass_id = subclass_id    # [H, W] int in [0, 2C) or IGNORE
        self.num_classes = int(num_classes)

    @property
    def num_subclasses(self):
        return 2 * self.num_classes

    def pixels_of(self, subclass_id):
        """(rows, cols) arrays of pixels in the given subclass."""
        return np.nonzero(self.subclass_id == subclass_id)


def extract_boundaries(labels, num_classes, thickness=1):
    """Split a label map into inner/boundary subclasses.

    labels: [H, W] integer array, values in [0, num_classes) or IGNORE.
    A class-c pixel is boundary iff some in-image pixel at Chebyshev
    distance <= thickness holds a different non-IGNORE label.
    """
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError("labels must be a 2-d map, got shape {}".format(labels.shape))
    if thickness < 1:
        raise ValueError("thickness must be >= 1")
    valid = labels != IGNORE
    if np.any(valid & ((labels < 0) | (labels >= num_classes))):
        bad = labels[valid & ((labels < 0) | (labels >= num_classes))][0]
        raise ValueError(
            "label {} out of range [0, {})".format(int(bad), num_classes))

    h, w = labels.shape
    boundary = np.zeros((h, w), dtype=bool)
    # compare against every in-image Chebyshev neighbor offset
    for di in range(-thickness, thickness + 1):
        for dj in range(-thickness, thickness + 1):
            if di == 0 and dj == 0:
                continue
            src_r = slice(max(di, 0), h + min(di, 0))
            src_c = slice(max(dj, 0), w + min(dj, 0))
            dst_r = slice(max(-di, 0), h + min(-di, 0))
            dst_c = slice(max(-dj, 0), w + min(-dj, 0))
            nb = labels[src_r, src_c]
            here = labels[dst_r, dst_c]
            differs = (nb != here) & (nb != IGNORE) & (here != IGNORE)
            boundary[dst_r, dst_c] |= differs

    region = np.where(valid, np.where(boundary, BOUNDARY, INNER), IGNORE)
    subclass = np.where(valid, 2 * labels + (region == BOUNDARY), IGNORE)
    return SubclassMap(np.where(valid, labels, IGNORE), region, subclass, num_classes)


SIBLING_MODES = ("unconcerned", "positive", "negative")


class SubclassRelation:
    """Positive/unconcerned/negative subclass sets for contrastive sampling.

    For an anchor of subclass s belonging to class c: positives come from s
    itself, the sibling subclass of c is unconcerned (excluded from both
    pools), and every subclass of every other class is negative. Background
    (class 0) contributes no anchors by default but its subclasses stay in
    everyone's negative pool.

    sibling_mode changes only how the same-class sibling is treated:
    "unconcerned" keeps it out of both pools, "positive" adds it to the
    positive pool, "negative" adds it to the negative pool.
    """

    def __init__(self, num_classes, exclude_background=True,
                 sibling_mode="unconcerned"):
        if num_classes < 2:
            raise ValueError("need at least 2 classes")
        if sibling_mode not in SIBLING_MODES:
            raise ValueError("sibling_mode must be one of {}".format(SIBLING_MODES))
        self.num_classes = int(num_classes)
        self.exclude_background = bool(exclude_background)
        self.sibling_mode = sibling_mode

    @property
    def num_subclasses(self):
        return 2 * self.num_classes

    def unconcerned(self, subclass_id):
        """The sibling subclass (same class, other region)."""
        return {subclass_id ^ 1}

    def positive_subclasses(self, subclass_id):
        if self.sibling_mode == "positive":
            return {subclass_id, subclass_id ^ 1}
        return {subclass_id}

    def negative_subclasses(self, subclass_id):
        c = class_of(subclass_id)
        negs = {s for s in range(self.num_subclasses) if class_of(s) != c}
        if self.sibling_mode == "negative":
            negs.add(subclass_id ^ 1)
        return negs

    def anchor_subclasses(self):
        """Subclasses eligible to produce anchors."""
        first = 2 if self.exclude_background else 0
        return list(range(first, self.num_subclasses))


def build_relation(num_classes, exclude_background=True,
                   sibling_mode="unconcerned"):
    return SubclassRelation(num_classes, exclude_background, sibling_mode)
