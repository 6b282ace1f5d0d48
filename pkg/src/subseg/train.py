"""Teacher-student training loop with subclass-contrastive regularization.

One step: forward the student on a mixed labeled/unlabeled batch, forward the
EMA teacher on the unlabeled part for pseudo-labels, split reference maps into
inner/boundary subclasses, refresh the per-subclass memory banks with
confident centroids, select low-confidence-but-reliable anchors, draw
positives/negatives per the subclass relation, and descend the weighted sum
of supervised, unsupervised, and contrastive losses. The teacher trails the
student by exponential moving average.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import time
from typing import Optional

import numpy as np

from subseg import autodiff as ad
from subseg.boundaries import SIBLING_MODES, build_relation, extract_boundaries
from subseg.data import DataFormatError, load_dataset
from subseg.losses import (
    LossConfig,
    bcl_loss,
    icl_loss,
    supervised_loss,
    unified_loss,
    unsupervised_loss,
)
from subseg.metrics import evaluate_segmentation
from subseg.nets import (
    ModelParams,
    ema_update,
    forward,
    init_params,
    load_checkpoint,
    pseudo_label,
    save_checkpoint,
)
from subseg.sampling import (
    MemoryBankSet,
    compute_centroids,
    draw_samples,
    select_anchors,
)

BOUNDARY_OBJECTIVES = ("subclass", "infonce")

METRIC_COLUMNS = ("step", "total", "sup", "unsup", "icl", "bcl", "alpha",
                  "mean_dice", "mean_jaccard", "mean_hd95")


class ConfigError(ValueError):
    pass


class NumericalError(RuntimeError):
    pass


@dataclasses.dataclass
class TrainConfig:
    data_dir: str = "data"
    out_dir: str = "runs/default"
    steps: int = 2000
    batch_labeled: int = 4
    batch_unlabeled: int = 4
    lr: float = 0.05
    momentum: float = 0.9
    ema_decay: float = 0.999
    temperature: float = 0.5
    hard_threshold: float = 0.75
    reliable_threshold: float = 0.95
    unsup_weight: float = 0.3
    contrast_weight: float = 0.1
    boundary_mix_max: float = 0.1
    boundary_mix_ramp_steps: Optional[int] = None  # None: 40% of steps
    k_anchor: int = 32
    k_pos: int = 8
    k_neg: int = 64
    bank_capacity: int = 256
    boundary_thickness: int = 1
    embed_dim: int = 32
    eval_every: int = 100
    seed: int = 0
    use_unsup: bool = True
    use_icl: bool = True
    use_bcl: bool = True
    sibling_mode: str = "unconcerned"
    exclude_background: bool = True
    boundary_objective: str = "subclass"
    debug_checks: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.batch_labeled < 1 or self.batch_unlabeled < 1:
            raise ConfigError("both batch sizes must be >= 1")
        if self.lr <= 0.0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError("ema_decay must lie in [0, 1]")
        for name in ("hard_threshold", "reliable_threshold"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ConfigError("{} must lie in (0, 1]".format(name))
        if min(self.k_anchor, self.k_pos, self.k_neg, self.bank_capacity) < 1:
            raise ConfigError("k_anchor, k_pos, k_neg, bank_capacity must be >= 1")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.sibling_mode not in SIBLING_MODES:
            raise ConfigError("sibling_mode must be one of {}".format(SIBLING_MODES))
        if self.boundary_objective not in BOUNDARY_OBJECTIVES:
            raise ConfigError(
                "boundary_objective must be one of {}".format(BOUNDARY_OBJECTIVES))
        # delegate range checks on the shared loss knobs
        try:
            self.loss_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def ramp_steps(self) -> int:
        if self.boundary_mix_ramp_steps is None:
            return int(round(0.4 * self.steps))
        return int(self.boundary_mix_ramp_steps)

    def loss_config(self) -> LossConfig:
        """Effective loss weights after applying the component switches.

        Disabled components zero out their weight; when only one contrastive
        term is active the mixing factor is pinned (0 for the inner term,
        1 for the boundary term) so logged components always satisfy
        total = sup + w_u*unsup + w_c*((1-alpha)*icl + alpha*bcl).
        """
        if self.use_icl and self.use_bcl:
            mix_max, ramp = self.boundary_mix_max, self.ramp_steps
        elif self.use_bcl:
            mix_max, ramp = 1.0, 0
        else:
            mix_max, ramp = 0.0, max(self.ramp_steps, 1)
        return LossConfig(
            temperature=self.temperature,
            unsup_weight=self.unsup_weight if self.use_unsup else 0.0,
            contrast_weight=(self.contrast_weight
                             if (self.use_icl or self.use_bcl) else 0.0),
            boundary_mix_max=mix_max,
            boundary_mix_ramp_steps=ramp,
            reliable_threshold=self.reliable_threshold,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError("unknown config keys: {}".format(sorted(unknown)))
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


class AuditLog:
    """Cross-checks every drawn anchor against the stated selection rules."""

    def __init__(self, relation, hard_threshold, reliable_threshold):
        self.relation = relation
        self.hard_threshold = hard_threshold
        self.reliable_threshold = reliable_threshold
        self.steps_audited = 0
        self.anchors_selected = 0
        self.anchors_drawn = 0
        self.eligibility_violations = 0
        self.relation_violations = 0
        n = relation.num_subclasses
        # counts of (anchor subclass, source subclass) among drawn negatives
        self.negative_coverage = np.zeros((n, n), dtype=np.int64)

    def record_step(self, anchors, entries):
        self.steps_audited += 1
        self.anchors_selected += len(anchors)
        ok = (anchors.student_conf <= self.hard_threshold) \
            & (anchors.ref_conf >= self.reliable_threshold)
        self.eligibility_violations += int(np.sum(~ok))
        for entry in entries:
            self.anchors_drawn += 1
            allowed_pos = self.relation.positive_subclasses(entry.subclass_id)
            allowed_neg = self.relation.negative_subclasses(entry.subclass_id)
            if not set(entry.pos_sources) <= allowed_pos:
                self.relation_violations += 1
            elif not set(entry.neg_sources) <= allowed_neg:
                self.relation_violations += 1
            for src in entry.neg_sources:
                self.negative_coverage[entry.subclass_id, src] += 1

    def coverage_outside_relation(self) -> int:
        """Drawn negatives whose (anchor, source) pair the relation forbids."""
        bad = 0
        n = self.relation.num_subclasses
        for s in range(n):
            allowed = self.relation.negative_subclasses(s)
            for src in range(n):
                if src not in allowed:
                    bad += int(self.negative_coverage[s, src])
        return bad

    def summary(self) -> dict:
        return {
            "steps_audited": self.steps_audited,
            "anchors_selected": self.anchors_selected,
            "anchors_drawn": self.anchors_drawn,
            "eligibility_violations": self.eligibility_violations,
            "relation_violations": self.relation_violations,
            "negatives_outside_relation": self.coverage_outside_relation(),
            "negative_coverage": {
                str(s): {str(t): int(v) for t, v in
                         enumerate(self.negative_coverage[s]) if v}
                for s in range(self.relation.num_subclasses)
                if self.negative_coverage[s].any()
            },
        }


def one_hot_probs(labels, num_classes):
    """[N, H, W] int labels -> [N, C, H, W] one-hot float array."""
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], num_classes) + labels.shape[1:])
    for c in range(num_classes):
        out[:, c] = labels == c
    return out


def sgd_step(params: ModelParams, velocity: dict, lr: float, momentum: float):
    for name, tensor in params.items():
        v = velocity[name]
        v *= momentum
        if tensor.grad is not None:
            v += tensor.grad
        tensor.data -= lr * v
    params.zero_grads()


def predict_batches(params: ModelParams, images, batch=8):
    """Argmax predictions for a list/array of [1, H, W] images (untaped)."""
    preds = []
    for start in range(0, len(images), batch):
        chunk = np.stack(images[start:start + batch])
        out = forward(params, chunk)
        preds.extend(np.argmax(out.probabilities.data, axis=1))
    return preds


def evaluate_params(params: ModelParams, samples, num_classes):
    preds = predict_batches(params, [s.image for s in samples])
    refs = [s.label for s in samples]
    return evaluate_segmentation(preds, refs, num_classes)


class Trainer:
    def __init__(self, cfg: TrainConfig, labeled, unlabeled, test):
        if not labeled:
            raise DataFormatError("no labeled training samples")
        if any(s.label is None for s in labeled):
            raise DataFormatError("a labeled-split sample carries no label map")
        if any(s.label is None for s in test):
            raise DataFormatError("a test sample carries no label map")
        self.cfg = cfg
        self.labeled = labeled
        self.unlabeled = unlabeled
        self.test = test
        self.num_classes = labeled[0].num_classes
        self.loss_cfg = cfg.loss_config()
        self.relation = build_relation(
            self.num_classes, exclude_background=cfg.exclude_background,
            sibling_mode=cfg.sibling_mode)
        self.student = init_params(self.num_classes, cfg.embed_dim, seed=cfg.seed)
        self.teacher = self.student.copy(requires_grad=False)
        self.velocity = {name: np.zeros_like(t.data)
                         for name, t in self.student.items()}
        self.banks = MemoryBankSet(2 * self.num_classes, cfg.bank_capacity,
                                   cfg.embed_dim)
        self.audit = AuditLog(self.relation, cfg.hard_threshold,
                              cfg.reliable_threshold)
        ss = np.random.SeedSequence([cfg.seed, 0x5E6])
        self.batch_rng, self.anchor_rng, self.draw_rng = (
            np.random.default_rng(child) for child in ss.spawn(3))
        self.contrast_active = ((cfg.use_icl or cfg.use_bcl)
                                and cfg.contrast_weight > 0.0)
        self.metrics_rows = []
        self.last_components = None

    def _pick(self, pool, size):
        n = len(pool)
        idx = self.batch_rng.choice(n, size=size, replace=n < size)
        return [pool[i] for i in idx]

    def train_step(self, step: int) -> dict:
        cfg = self.cfg
        batch_l = self._pick(self.labeled, cfg.batch_labeled)
        batch_u = self._pick(self.unlabeled, cfg.batch_unlabeled) \
            if self.unlabeled else []
        images = np.stack([s.image for s in batch_l + batch_u])
        labels_l = np.stack([s.label for s in batch_l])

        # the teacher pass matters only when some loss consumes pseudo-labels
        teacher_out = None
        pseudo = teacher_conf = None
        if batch_u and (cfg.use_unsup or self.contrast_active):
            teacher_out = forward(self.teacher, images[len(batch_l):])
            pseudo, teacher_conf = pseudo_label(teacher_out)

        with ad.Tape():
            out = forward(self.student, images)
            probs = out.probabilities
            probs_l = ad.gather(probs, 0, np.arange(len(batch_l)))
            sup = supervised_loss(probs_l, labels_l)
            if cfg.use_unsup and batch_u:
                probs_u = ad.gather(probs, 0, np.arange(len(batch_l), len(images)))
                unsup = unsupervised_loss(probs_u, pseudo, teacher_conf,
                                          cfg.reliable_threshold)
            else:
                unsup = ad.Tensor(0.0)

            icl = ad.Tensor(0.0)
            bcl = ad.Tensor(0.0)
            if self.contrast_active:
                icl, bcl = self._contrastive_terms(out, labels_l, pseudo,
                                                   teacher_out)

            total, components = unified_loss(sup, unsup, icl, bcl,
                                             self.loss_cfg, step)
            if not np.isfinite(total.data):
                raise NumericalError(
                    "non-finite loss at step {}: {}".format(step, components))
            ad.backward(total)

        sgd_step(self.student, self.velocity, cfg.lr, cfg.momentum)
        ema_update(self.teacher, self.student, cfg.ema_decay)
        self.last_components = components
        return components

    def _contrastive_terms(self, out, labels_l, pseudo, teacher_out):
        cfg = self.cfg
        reference_maps = labels_l
        reference_probs = one_hot_probs(labels_l, self.num_classes)
        if teacher_out is not None:
            reference_maps = np.concatenate([labels_l, pseudo])
            reference_probs = np.concatenate([
                reference_probs, teacher_out.probabilities.data])
        submaps = np.stack([
            extract_boundaries(m, self.num_classes, cfg.boundary_thickness)
            .subclass_id for m in reference_maps])
        ref_conf = reference_probs.max(axis=1)

        # refresh banks before drawing so fresh centroids are available
        emb_data = out.embeddings.data
        for i in range(len(reference_maps)):
            self.banks.push_centroids(compute_centroids(
                emb_data[i], submaps[i], ref_conf[i], cfg.reliable_threshold))

        anchors = select_anchors(
            out.probabilities.data, reference_probs, out.embeddings, submaps,
            self.relation, cfg.hard_threshold, cfg.reliable_threshold,
            cfg.k_anchor, self.anchor_rng)
        entries = draw_samples(anchors, self.banks, self.relation,
                               cfg.k_pos, cfg.k_neg, self.draw_rng)
        self.audit.record_step(anchors, entries)

        icl = ad.Tensor(0.0)
        bcl = ad.Tensor(0.0)
        if cfg.use_icl:
            icl = icl_loss(anchors, entries, cfg.temperature)
        if cfg.use_bcl:
            if cfg.boundary_objective == "infonce":
                bcl = icl_loss(anchors, entries, cfg.temperature, boundary=True)
            else:
                bcl = bcl_loss(anchors, entries)
        return icl, bcl

    def evaluate(self, params=None):
        return evaluate_params(params or self.student, self.test,
                               self.num_classes)

    def record_eval(self, step, components):
        scores = self.evaluate()
        row = dict(components)
        row["step"] = step
        row["mean_dice"] = scores["mean_dice"]
        row["mean_jaccard"] = scores["mean_jaccard"]
        row["mean_hd95"] = scores["mean_hd95"]
        self.metrics_rows.append(row)
        return scores

    def run(self):
        ad.set_debug_checks(self.cfg.debug_checks)
        try:
            start = time.time()
            for step in range(self.cfg.steps):
                components = self.train_step(step)
                if (step + 1) % self.cfg.eval_every == 0 \
                        or step + 1 == self.cfg.steps:
                    self.record_eval(step + 1, components)
            runtime = time.time() - start
        finally:
            ad.set_debug_checks(False)
        final_scores = self.evaluate()
        teacher_scores = self.evaluate(self.teacher)
        return {
            "config": self.cfg.to_dict(),
            "num_classes": self.num_classes,
            "n_labeled": len(self.labeled),
            "n_unlabeled": len(self.unlabeled),
            "n_test": len(self.test),
            "runtime_seconds": runtime,
            "final": {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                      for k, v in final_scores.items()},
            "final_teacher_mean_dice": teacher_scores["mean_dice"],
            "last_components": self.last_components,
            "bank_sizes": self.banks.sizes(),
            "audit": self.audit.summary(),
        }


def format_cell(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return "{:.10f}".format(float(value))


def write_metrics_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            writer.writerow([format_cell(row[col]) for col in METRIC_COLUMNS])


def write_report(path, report):
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")


def run_training(cfg: TrainConfig) -> dict:
    """Train per config, write model.ckpt/teacher.ckpt/metrics.csv/report.json."""
    labeled, unlabeled, test = load_dataset(cfg.data_dir)
    trainer = Trainer(cfg, labeled, unlabeled, test)
    os.makedirs(cfg.out_dir, exist_ok=True)
    try:
        report = trainer.run()
    except NumericalError:
        dump = {
            "config": cfg.to_dict(),
            "last_components": trainer.last_components,
            "bank_sizes": trainer.banks.sizes(),
            "steps_completed": len(trainer.metrics_rows),
        }
        write_report(os.path.join(cfg.out_dir, "numerical_failure.json"), dump)
        raise
    save_checkpoint(os.path.join(cfg.out_dir, "model.ckpt"), trainer.student)
    save_checkpoint(os.path.join(cfg.out_dir, "teacher.ckpt"), trainer.teacher)
    write_metrics_csv(os.path.join(cfg.out_dir, "metrics.csv"),
                      trainer.metrics_rows)
    write_report(os.path.join(cfg.out_dir, "report.json"), report)
    return report


def evaluate_checkpoint(checkpoint_path: str, data_dir: str) -> dict:
    """Score a saved model on the dataset's test split."""
    params = load_checkpoint(checkpoint_path)
    _, _, test = load_dataset(data_dir)
    if not test:
        raise DataFormatError("dataset has no test samples")
    scores = evaluate_params(params, test, params.num_classes)
    return {k: (v.tolist() if isinstance(v, np.ndarray) else v)
            for k, v in scores.items()}
