"""Threshold sweeps and multi-seed comparison suites over the trainer."""

from __future__ import annotations

import csv
import dataclasses
import json
import os

import numpy as np

from subseg.train import ConfigError, TrainConfig, run_training

# each suite row: (name, config overrides)
ABLATION_SUITES = {
    "components": [
        ("sup_only", {"use_unsup": False, "use_icl": False, "use_bcl": False}),
        ("sup_unsup", {"use_unsup": True, "use_icl": False, "use_bcl": False}),
        ("sup_unsup_icl", {"use_unsup": True, "use_icl": True, "use_bcl": False}),
        ("sup_unsup_bcl", {"use_unsup": True, "use_icl": False, "use_bcl": True}),
        ("full", {"use_unsup": True, "use_icl": True, "use_bcl": True}),
    ],
    "relation": [
        ("sibling_negative", {"sibling_mode": "negative"}),
        ("sibling_positive", {"sibling_mode": "positive"}),
        ("sibling_unconcerned", {"sibling_mode": "unconcerned"}),
    ],
    "bcl_vs_infonce": [
        ("boundary_subclass", {"boundary_objective": "subclass"}),
        ("boundary_infonce", {"boundary_objective": "infonce"}),
    ],
}

RESULT_COLUMNS = ("row", "seed", "mean_dice", "mean_jaccard", "mean_hd95")
SWEEP_COLUMNS = ("hard_threshold", "reliable_threshold", "mean_dice",
                 "mean_jaccard", "mean_hd95", "anchors_drawn")


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, str):
        return value
    return "{:.10f}".format(float(value))


def _write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[col]) for col in columns])


def run_ablation(cfg: TrainConfig, suite: str, seeds=(0, 1, 2)) -> dict:
    """Train every suite row once per seed; write results.csv + summary.json.

    All rows share the dataset and every non-switch hyperparameter, so the
    only varying factors are the row's component switches and the seed.
    """
    if suite not in ABLATION_SUITES:
        raise ConfigError("unknown suite {!r}; choose from {}".format(
            suite, sorted(ABLATION_SUITES)))
    if not seeds:
        raise ConfigError("need at least one seed")
    os.makedirs(cfg.out_dir, exist_ok=True)
    rows = []
    for name, overrides in ABLATION_SUITES[suite]:
        for seed in seeds:
            sub = dataclasses.replace(
                cfg, seed=int(seed),
                out_dir=os.path.join(cfg.out_dir, "{}_seed{}".format(name, seed)),
                **overrides)
            report = run_training(sub)
            rows.append({
                "row": name,
                "seed": int(seed),
                "mean_dice": report["final"]["mean_dice"],
                "mean_jaccard": report["final"]["mean_jaccard"],
                "mean_hd95": report["final"]["mean_hd95"],
            })
    summary = {}
    for name, _ in ABLATION_SUITES[suite]:
        dices = [r["mean_dice"] for r in rows if r["row"] == name]
        summary[name] = {
            "per_seed_dice": dices,
            "mean_dice": float(np.mean(dices)),
            "std_dice": float(np.std(dices)),
        }
    _write_csv(os.path.join(cfg.out_dir, "results.csv"), RESULT_COLUMNS, rows)
    with open(os.path.join(cfg.out_dir, "summary.json"), "w") as fh:
        json.dump({"suite": suite, "seeds": [int(s) for s in seeds],
                   "rows": summary}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return {"suite": suite, "rows": rows, "summary": summary}


def run_sweep(cfg: TrainConfig, hard_values, reliable_values) -> dict:
    """Grid over the two anchor thresholds; the config's own point is always
    included so the default cell can be compared against its neighbors."""
    hard_values = [float(v) for v in hard_values]
    reliable_values = [float(v) for v in reliable_values]
    if not hard_values or not reliable_values:
        raise ConfigError("sweep needs at least one value per threshold")
    pairs = [(h, r) for h in hard_values for r in reliable_values]
    default = (cfg.hard_threshold, cfg.reliable_threshold)
    if default not in pairs:
        pairs.append(default)
    os.makedirs(cfg.out_dir, exist_ok=True)
    rows = []
    for h, r in pairs:
        sub = dataclasses.replace(
            cfg, hard_threshold=h, reliable_threshold=r,
            out_dir=os.path.join(cfg.out_dir, "hard{:g}_rel{:g}".format(h, r)))
        report = run_training(sub)
        rows.append({
            "hard_threshold": h,
            "reliable_threshold": r,
            "mean_dice": report["final"]["mean_dice"],
            "mean_jaccard": report["final"]["mean_jaccard"],
            "mean_hd95": report["final"]["mean_hd95"],
            "anchors_drawn": report["audit"]["anchors_drawn"],
        })
    _write_csv(os.path.join(cfg.out_dir, "results.csv"), SWEEP_COLUMNS, rows)
    return {"rows": rows, "default_point": list(default)}
