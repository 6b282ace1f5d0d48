"""Randomized finite-difference verification of every loss gradient path."""

from __future__ import annotations

import numpy as np

from subseg import autodiff as ad
from subseg.boundaries import BOUNDARY, INNER, build_relation, subclass_of
from subseg.losses import (
    LossConfig,
    bcl_from_sims,
    bcl_loss,
    icl_from_sims,
    icl_loss,
    supervised_loss,
    unified_loss,
    unsupervised_loss,
)
from subseg.sampling import AnchorSet, MemoryBankSet, draw_samples

THRESHOLD = 1e-4


def _icl_case(rng):
    n_pos, n_neg = int(rng.integers(1, 6)), int(rng.integers(1, 12))
    sims = ad.Tensor(rng.uniform(-1, 1, size=n_pos + n_neg))
    tau = float(rng.uniform(0.3, 1.0))

    def f(t):
        pos = ad.gather(t, 0, np.arange(n_pos))
        neg = ad.gather(t, 0, np.arange(n_pos, n_pos + n_neg))
        return icl_from_sims(pos, neg, tau)

    return f, sims


def _bcl_case(rng):
    n_pos, n_neg = int(rng.integers(1, 6)), int(rng.integers(1, 12))
    sims = ad.Tensor(rng.uniform(-1, 1, size=n_pos + n_neg))

    def f(t):
        pos = ad.gather(t, 0, np.arange(n_pos))
        neg = ad.gather(t, 0, np.arange(n_pos, n_pos + n_neg))
        return bcl_from_sims(pos, neg)

    return f, sims


def _sup_case(rng):
    labels = rng.integers(0, 3, size=(1, 4, 4))
    logits = ad.Tensor(rng.normal(size=(1, 3, 4, 4)))

    def f(t):
        return supervised_loss(ad.softmax(t, axis=1), labels)

    return f, logits


def _unsup_case(rng):
    pseudo = rng.integers(0, 3, size=(1, 4, 4))
    conf = rng.uniform(0.9, 1.0, size=(1, 4, 4))
    logits = ad.Tensor(rng.normal(size=(1, 3, 4, 4)))

    def f(t):
        return unsupervised_loss(ad.softmax(t, axis=1), pseudo, conf, 0.95)

    return f, logits


def _composite_case(rng):
    """Full objective: logits drive sup/unsup, embeddings drive the
    contrastive terms through anchor gathering and bank draws."""
    k, dim = 4, 6
    n_logit = 1 * 3 * 4 * 4
    labels = rng.integers(0, 3, size=(1, 4, 4))
    pseudo = rng.integers(0, 3, size=(1, 4, 4))
    conf = rng.uniform(0.9, 1.0, size=(1, 4, 4))
    cfg = LossConfig(boundary_mix_ramp_steps=10)
    subs = np.array([subclass_of(1, INNER), subclass_of(1, BOUNDARY),
                     subclass_of(2, INNER), subclass_of(2, BOUNDARY)])
    relation = build_relation(3)
    banks = MemoryBankSet(6, capacity=8, dim=dim)
    bank_rng = np.random.default_rng(int(rng.integers(1 << 31)))
    for s in range(6):
        for _ in range(4):
            v = bank_rng.normal(size=dim)
            banks.push(s, v / np.linalg.norm(v))
    draw_seed = int(rng.integers(1 << 31))
    x = ad.Tensor(np.concatenate([rng.normal(size=n_logit),
                                  rng.normal(size=k * dim)]))

    def f(t):
        logits = ad.reshape(ad.gather(t, 0, np.arange(n_logit)), (1, 3, 4, 4))
        raw = ad.reshape(
            ad.gather(t, 0, np.arange(n_logit, n_logit + k * dim)), (k, dim))
        probs = ad.softmax(logits, axis=1)
        emb = ad.l2_normalize(raw, axis=1)
        anchors = AnchorSet(emb, subs, np.zeros(k, dtype=int),
                            np.zeros(k, dtype=int), np.zeros(k, dtype=int),
                            np.full(k, 0.5), np.ones(k))
        entries = draw_samples(anchors, banks, relation, 2, 5, rng=draw_seed)
        total, _ = unified_loss(
            supervised_loss(probs, labels),
            unsupervised_loss(probs, pseudo, conf, 0.95),
            icl_loss(anchors, entries, cfg.temperature),
            bcl_loss(anchors, entries),
            cfg, step=5)
        return total

    return f, x


CASES = (
    ("inner_contrastive", _icl_case),
    ("boundary_contrastive", _bcl_case),
    ("supervised", _sup_case),
    ("unsupervised", _unsup_case),
    ("composite", _composite_case),
)


def gradient_suite(seed: int = 0, instances_per_case: int = 10) -> dict:
    """Max finite-difference error per loss path over randomized instances."""
    rng = np.random.default_rng(seed)
    results = {}
    for name, make in CASES:
        worst = 0.0
        for _ in range(instances_per_case):
            f, x = make(rng)
            worst = max(worst, ad.grad_check(f, x))
        results[name] = worst
    results["instances"] = instances_per_case * len(CASES)
    results["passed"] = all(results[name] < THRESHOLD for name, _ in CASES)
    return results
