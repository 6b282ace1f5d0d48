"""Command line entry points.

Exit codes: 0 success, 2 bad configuration or arguments, 3 unreadable or
inconsistent data, 4 numerical failure during training or checking.
"""

from __future__ import annotations

import argparse
import json
import sys

from subseg.data import (
    DataFormatError,
    GeometryError,
    SplitSpec,
    generate_dataset,
    save_dataset,
)
from subseg.experiments import ABLATION_SUITES, run_ablation, run_sweep
from subseg.gradcheck import THRESHOLD, gradient_suite
from subseg.nets import CheckpointError
from subseg.train import (
    ConfigError,
    NumericalError,
    TrainConfig,
    evaluate_checkpoint,
    run_training,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _parse_override(pair: str):
    if "=" not in pair:
        raise ConfigError("--set expects key=value, got {!r}".format(pair))
    key, raw = pair.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # bare strings stay strings
    return key.strip(), value


def _floats(text: str):
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise ConfigError("expected comma-separated numbers, got {!r}".format(
            text)) from exc


def _ints(text: str):
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise ConfigError("expected comma-separated integers, got {!r}".format(
            text)) from exc


def _build_config(args) -> TrainConfig:
    raw = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                raw = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError("config file not found: {}".format(args.config)) \
                from exc
        except json.JSONDecodeError as exc:
            raise ConfigError("config file is not valid JSON: {}".format(exc)) \
                from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
    for pair in getattr(args, "set", None) or []:
        key, value = _parse_override(pair)
        raw[key] = value
    # explicit flags win over file and --set values
    for flag, key in (("data", "data_dir"), ("out", "out_dir"),
                      ("steps", "steps"), ("seed", "seed")):
        value = getattr(args, flag, None)
        if value is not None:
            raw[key] = value
    return TrainConfig.from_dict(raw)


def _add_config_args(parser):
    parser.add_argument("--config", help="JSON file of config fields")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config field (repeatable)")
    parser.add_argument("--data", help="dataset directory")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--steps", type=int)
    parser.add_argument("--seed", type=int)


def cmd_gen_data(args) -> int:
    spec = SplitSpec(n_train=args.n_train, n_test=args.n_test,
                     labeled_fraction=args.labeled_fraction, seed=args.seed)
    labeled, unlabeled, test = generate_dataset(
        spec, height=args.height, width=args.width,
        num_classes=args.num_classes, noise_level=args.noise_level)
    save_dataset(args.out, labeled, unlabeled, test)
    print("wrote {} labeled / {} unlabeled / {} test samples to {}".format(
        len(labeled), len(unlabeled), len(test), args.out))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _build_config(args)
    report = run_training(cfg)
    print("final mean dice {:.4f} after {} steps; outputs in {}".format(
        report["final"]["mean_dice"], cfg.steps, cfg.out_dir))
    return EXIT_OK


def cmd_eval(args) -> int:
    scores = evaluate_checkpoint(args.checkpoint, args.data)
    text = json.dumps(scores, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return EXIT_OK


def cmd_grad_check(args) -> int:
    results = gradient_suite(seed=args.seed, instances_per_case=args.instances)
    for name, value in results.items():
        if isinstance(value, float):
            print("{:<22} max err {:.3e}".format(name, value))
    print("{} instances, threshold {:g}: {}".format(
        results["instances"], THRESHOLD,
        "PASS" if results["passed"] else "FAIL"))
    return EXIT_OK if results["passed"] else EXIT_NUMERIC


def cmd_sweep(args) -> int:
    cfg = _build_config(args)
    result = run_sweep(cfg, _floats(args.hard), _floats(args.reliable))
    for row in result["rows"]:
        print("hard {:.2f} reliable {:.2f} -> dice {:.4f}".format(
            row["hard_threshold"], row["reliable_threshold"], row["mean_dice"]))
    print("results in {}/results.csv".format(cfg.out_dir))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _build_config(args)
    result = run_ablation(cfg, args.suite, _ints(args.seeds))
    for name, stats in result["summary"].items():
        print("{:<22} dice {:.4f} +/- {:.4f}".format(
            name, stats["mean_dice"], stats["std_dice"]))
    print("results in {}/results.csv".format(cfg.out_dir))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="subseg",
        description="semi-supervised segmentation with subclass contrast")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=40)
    p.add_argument("--n-test", type=int, default=8)
    p.add_argument("--labeled-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--num-classes", type=int, default=4)
    p.add_argument("--noise-level", type=float, default=0.08)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model")
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="also write scores to this JSON file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="verify loss gradients numerically")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=10,
                   help="randomized instances per loss path")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("sweep", help="grid over the two anchor thresholds")
    _add_config_args(p)
    p.add_argument("--hard", default="0.65,0.75,0.85",
                   help="comma-separated hard_threshold values")
    p.add_argument("--reliable", default="0.90,0.95,0.99",
                   help="comma-separated reliable_threshold values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="run a multi-seed comparison suite")
    _add_config_args(p)
    p.add_argument("--suite", required=True, choices=sorted(ABLATION_SUITES))
    p.add_argument("--seeds", default="0,1,2",
                   help="comma-separated training seeds")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print("config error: {}".format(exc), file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, CheckpointError, GeometryError,
            FileNotFoundError, NotADirectoryError) as exc:
        print("data error: {}".format(exc), file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # bad SplitSpec / sample parameters reach here
        print("config error: {}".format(exc), file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError) as exc:
        print("numerical error: {}".format(exc), file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
