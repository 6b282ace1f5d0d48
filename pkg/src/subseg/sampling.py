"""Anchor selection, subclass memory banks, and contrast-sample drawing.

Anchors are hard-but-reliable pixels: the student must be unsure
(max student prob <= hard_threshold) while the reference is confident
(max reference prob >= reliable_threshold, where the reference is the
one-hot ground truth on labeled images and the teacher on unlabeled ones).
Anchor embeddings stay on the tape so the contrastive losses reach the
student; everything stored in the banks is detached.

Every drawn positive/negative carries the id of the bank it came from, so a
training run can be audited after the fact for relation violations.
"""

from __future__ import annotations

from collections import deque

import numpy as np

from subseg import autodiff as ad
from subseg.boundaries import IGNORE

__all__ = [
    "AnchorSet",
    "MemoryBankSet",
    "DrawEntry",
    "select_anchors",
    "compute_centroids",
    "draw_samples",
]


class AnchorSet:
    """Selected anchor pixels with taped embeddings and audit metadata."""

    def __init__(self, embeddings, subclass_ids, image_index, rows, cols,
                 student_conf, ref_conf):
        self.embeddings = embeddings          # Tensor [K, D] or None when empty
        self.subclass_ids = subclass_ids      # [K] int
        self.image_index = image_index        # [K] int
        self.rows = rows                      # [K] int
        self.cols = cols                      # [K] int
        self.student_conf = student_conf      # [K] float, max student prob
        self.ref_conf = ref_conf              # [K] float, max reference prob

    def __len__(self):
        return len(self.subclass_ids)

    def anchor_embedding(self, i):
        """Taped [D] embedding of anchor i."""
        row = ad.gather(self.embeddings, 0, [int(i)])
        return ad.reshape(row, (self.embeddings.shape[1],))


def select_anchors(student_probs, reference_probs, embeddings, subclass_maps,
                   relation, hard_threshold, reliable_threshold, k_anchor, rng):
    """Pick up to k_anchor eligible pixels per anchor subclass.

    student_probs/reference_probs: [N, C, H, W] arrays; embeddings: Tensor
    [N, D, H, W]; subclass_maps: [N, H, W] int array. Eligibility is
    max(student) <= hard_threshold and max(reference) >= reliable_threshold,
    both inclusive.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    student_probs = np.asarray(student_probs)
    reference_probs = np.asarray(reference_probs)
    subclass_maps = np.asarray(subclass_maps)
    n, _, h, w = student_probs.shape
    if reference_probs.shape != student_probs.shape:
        raise ValueError("student/reference probability shapes differ")
    if subclass_maps.shape != (n, h, w):
        raise ValueError("subclass map shape does not match probabilities")

    s_conf = student_probs.max(axis=1)
    r_conf = reference_probs.max(axis=1)
    eligible = (s_conf <= hard_threshold) & (r_conf >= reliable_threshold) \
        & (subclass_maps != IGNORE)

    d = embeddings.shape[1]
    picked_flat = []
    meta = {"subclass": [], "img": [], "row": [], "col": [],
            "sconf": [], "rconf": []}
    for s in relation.anchor_subclasses():
        cand = np.argwhere(eligible & (subclass_maps == s))
        if len(cand) == 0:
            continue
        if len(cand) > k_anchor:
            keep = rng.choice(len(cand), size=k_anchor, replace=False)
            keep.sort()
            cand = cand[keep]
        for (img, r, c) in cand:
            meta["subclass"].append(s)
            meta["img"].append(img)
            meta["row"].append(r)
            meta["col"].append(c)
            meta["sconf"].append(s_conf[img, r, c])
            meta["rconf"].append(r_conf[img, r, c])
            base = (img * d * h + np.arange(d) * h + r) * w + c
            picked_flat.append(base)

    if not picked_flat:
        return AnchorSet(None, np.zeros(0, dtype=int), np.zeros(0, dtype=int),
                         np.zeros(0, dtype=int), np.zeros(0, dtype=int),
                         np.zeros(0), np.zeros(0))

    flat = ad.reshape(embeddings, (embeddings.data.size,))
    idx = np.concatenate(picked_flat)
    gathered = ad.gather(flat, 0, idx)
    emb = ad.reshape(gathered, (len(picked_flat), d))
    return AnchorSet(
        emb,
        np.array(meta["subclass"], dtype=int),
        np.array(meta["img"], dtype=int),
        np.array(meta["row"], dtype=int),
        np.array(meta["col"], dtype=int),
        np.array(meta["sconf"]),
        np.array(meta["rconf"]),
    )


def compute_centroids(embedding_data, subclass_map, ref_conf, reliable_threshold):
    """Per-subclass unit-norm centroids of confident pixels in one image.

    embedding_data: detached [D, H, W] array; subclass_map, ref_conf: [H, W].
    Subclasses with no confident member produce nothing.
    """
    embedding_data = np.asarray(embedding_data)
    d = embedding_data.shape[0]
    flat_emb = embedding_data.reshape(d, -1)
    flat_sub = np.asarray(subclass_map).reshape(-1)
    flat_conf = np.asarray(ref_conf).reshape(-1)
    confident = flat_conf >= reliable_threshold
    out = []
    for s in np.unique(flat_sub):
        if s == IGNORE:
            continue
        members = confident & (flat_sub == s)
        if not members.any():
            continue
        centroid = flat_emb[:, members].mean(axis=1)
        norm = np.linalg.norm(centroid)
        if norm > 0.0:
            centroid = centroid / norm
        out.append((int(s), centroid))
    return out


class MemoryBankSet:
    """One FIFO queue of detached unit vectors per subclass."""

    def __init__(self, num_subclasses, capacity, dim):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.num_subclasses = int(num_subclasses)
        self.capacity = int(capacity)
        self.dim = int(dim)
        self._queues = [deque(maxlen=capacity) for _ in range(num_subclasses)]
        self.pushes = 0

    def push(self, subclass_id, vector):
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.dim,):
            raise ValueError("expected a {}-vector, got shape {}".format(
                self.dim, vector.shape))
        self._queues[subclass_id].append(vector.copy())
        self.pushes += 1

    def push_centroids(self, centroids):
        for s, vec in centroids:
            self.push(s, vec)

    def size(self, subclass_id):
        return len(self._queues[subclass_id])

    def sizes(self):
        return [len(q) for q in self._queues]

    def vectors(self, subclass_id):
        return list(self._queues[subclass_id])

    def pooled(self, subclass_ids):
        """(matrix [M, D], source subclass id per row) over several banks."""
        mats, sources = [], []
        for s in sorted(subclass_ids):
            q = self._queues[s]
            if q:
                mats.append(np.stack(q))
                sources.append(np.full(len(q), s, dtype=int))
        if not mats:
            return np.zeros((0, self.dim)), np.zeros(0, dtype=int)
        return np.concatenate(mats), np.concatenate(sources)


class DrawEntry:
    """Positive/negative vectors (with bank provenance) for one anchor."""

    def __init__(self, anchor_row, subclass_id, positives, negatives,
                 pos_sources, neg_sources):
        self.anchor_row = anchor_row
        self.subclass_id = subclass_id
        self.positives = positives      # [P, D]
        self.negatives = negatives      # [Nn, D]
        self.pos_sources = pos_sources  # [P] bank subclass ids
        self.neg_sources = neg_sources  # [Nn]


def draw_samples(anchors, banks, relation, k_pos, k_neg, rng):
    """Draw up to k_pos positives and k_neg negatives per anchor.

    Anchors whose positive or negative pool is empty are dropped (they
    contribute no loss). Selection is uniform without replacement, seeded.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    entries = []
    pools = {}
    for s in set(anchors.subclass_ids.tolist()):
        pools[s] = (banks.pooled(relation.positive_subclasses(s)),
                    banks.pooled(relation.negative_subclasses(s)))
    for i, s in enumerate(anchors.subclass_ids):
        (pos_mat, pos_src), (neg_mat, neg_src) = pools[int(s)]
        if len(pos_mat) == 0 or len(neg_mat) == 0:
            continue
        if len(pos_mat) > k_pos:
            sel = rng.choice(len(pos_mat), size=k_pos, replace=False)
            pos = pos_mat[sel]
            psrc = pos_src[sel]
        else:
            pos, psrc = pos_mat, pos_src
        if len(neg_mat) > k_neg:
            sel = rng.choice(len(neg_mat), size=k_neg, replace=False)
            neg = neg_mat[sel]
            nsrc = neg_src[sel]
        else:
            neg, nsrc = neg_mat, neg_src
        entries.append(DrawEntry(i, int(s), pos, neg, psrc, nsrc))
    return entries
