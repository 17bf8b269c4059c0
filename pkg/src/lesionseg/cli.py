"""Command-line entry point.

Exit codes: 0 success, 1 usage/config error, 2 data or IO error,
3 self-test failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import netpbm
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import AugPolicy, augment, dataset_scan, load_dataset, load_sample
from .selftest import TOLERANCE, gradient_suite
from .trainer import (Phase, Segmenter, TrainConfig, TrainingError, format_log, merge_checkpoints,
                      predict, resize_nearest, train_phase, tune_threshold)

logger = logging.getLogger("lesionseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_SELFTEST = 0, 1, 2, 3

COMMANDS = ("train-scanet", "train-updcnn", "train-joint", "predict", "eval", "augment", "gradcheck")
PHASES = {"train-scanet": Phase.SCANET_ONLY, "train-updcnn": Phase.UPDCNN_ONLY,
          "train-joint": Phase.JOINT}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def default_config() -> dict:
    policy = asdict(AugPolicy())
    return {
        "train": asdict(TrainConfig()),
        "aug": {k: list(v) if isinstance(v, tuple) else v for k, v in policy.items()},
        "data": {"train_dir": None, "val_dir": None},
        "out_dir": "runs",
    }


def _merge(base: dict, override: dict, where: str) -> dict:
    out = dict(base)
    for key, value in override.items():
        if key not in base:
            raise UsageError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise UsageError(f"config key {where}{key!r} must be an object")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def resolve_config(path, args) -> dict:
    cfg = default_config()
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except OSError as err:
            raise OSError(f"cannot read config {path}: {err}") from err
        except json.JSONDecodeError as err:
            raise UsageError(f"config {path} is not valid JSON: {err}") from err
        if not isinstance(user, dict):
            raise UsageError("config must be a JSON object")
        cfg = _merge(cfg, user, "")
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
    if args.out is not None:
        cfg["out_dir"] = args.out
    if getattr(args, "data", None) is not None:
        cfg["data"]["train_dir" if args.command in PHASES or args.command == "augment" else "val_dir"] = args.data
    return cfg


def _train_config(cfg: dict) -> TrainConfig:
    tc = TrainConfig(**cfg["train"])
    tc.width_scale = str(tc.width_scale)
    try:
        tc.validate()
    except ValueError as err:
        raise UsageError(f"train config: {err}") from err
    return tc


def _policy(cfg: dict) -> AugPolicy:
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in cfg["aug"].items()}
    try:
        return AugPolicy(**kwargs)
    except ValueError as err:
        raise UsageError(f"aug config: {err}") from err


def _need_dir(cfg: dict, key: str) -> Path:
    value = cfg["data"][key]
    if value is None:
        raise UsageError(f"no dataset directory: set data.{key} in the config or pass --data")
    return Path(value)


def _load_init(paths):
    if not paths:
        return None
    return merge_checkpoints([load_checkpoint(p) for p in paths])


def cmd_train(args, cfg, out: Path) -> int:
    phase = PHASES[args.command]
    tc = _train_config(cfg)
    if phase is Phase.JOINT and not args.init and not args.random_init:
        raise UsageError("train-joint uses the separately trained branches as pretraining values; "
                         "pass --init (scanet and updcnn checkpoints) or --random-init")
    init = _load_init(args.init)
    dataset = load_dataset(_need_dir(cfg, "train_dir"))
    if not dataset:
        raise OSError("training set is empty")
    try:
        ckpt, log = train_phase(phase, dataset, tc, init=init, policy=_policy(cfg),
                                allow_random_init=args.random_init)
    except TrainingError as err:
        raise UsageError(str(err)) from err
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, out / f"{phase.value}.ckpt")
    (out / f"{phase.value}_loss.csv").write_text(format_log(log))
    print(f"wrote {out / (phase.value + '.ckpt')} after {len(log)} steps")
    return EXIT_OK


def _model_from(args) -> Segmenter:
    if not args.init:
        raise UsageError(f"{args.command} needs --init <checkpoint>")
    return Segmenter.from_checkpoint(_load_init(args.init))


def cmd_predict(args, cfg, out: Path) -> int:
    threshold = 0.5 if args.threshold is None else args.threshold
    model = _model_from(args)
    root = _need_dir(cfg, "val_dir")
    images = sorted((root / "images").glob("*.ppm")) if (root / "images").is_dir() else sorted(root.glob("*.ppm"))
    if not images:
        raise OSError(f"no .ppm images under {root}")
    out.mkdir(parents=True, exist_ok=True)
    for path in images:
        image = netpbm.load_image(path)
        mask, prob = predict(model, image, threshold)
        netpbm.save_mask(out / f"{path.stem}_mask.pgm", mask)
        netpbm.save_mask(out / f"{path.stem}_prob.pgm", resize_nearest(prob, *image.shape[1:]))
    print(f"predicted {len(images)} images at threshold {threshold}")
    return EXIT_OK


def cmd_eval(args, cfg, out: Path) -> int:
    tc = _train_config(cfg)
    model = _model_from(args)
    dataset = load_dataset(_need_dir(cfg, "val_dir"))
    if not dataset:
        raise OSError("validation set is empty")
    best, table = tune_threshold(model, dataset, tc.threshold_grid)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "thresholds.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["threshold", "mean_jaccard"])
        for t, score in table:
            writer.writerow([f"{t:.2f}", repr(score)])
    print(f"tuned threshold {best:.2f} (mean Jaccard {dict(table)[best]:.4f})")
    return EXIT_OK


def cmd_augment(args, cfg, out: Path) -> int:
    tc = _train_config(cfg)
    policy = _policy(cfg)
    root = _need_dir(cfg, "train_dir")
    ids = dataset_scan(root)
    if not ids:
        raise OSError(f"no samples under {root}")
    sample = load_sample(root, ids[0])
    out.mkdir(parents=True, exist_ok=True)
    for k in range(args.count):
        aug = augment(sample, policy, tc.seed * 1000 + k)
        netpbm.save_image(out / f"{sample.id}_aug{k}.ppm", aug.image)
        netpbm.save_mask(out / f"{sample.id}_aug{k}_segmentation.pgm", aug.mask)
    print(f"wrote {args.count} previews of {sample.id}")
    return EXIT_OK


def cmd_gradcheck(args, cfg, out: Path) -> int:
    results = gradient_suite(seed=cfg["train"]["seed"])
    for name, err in results.items():
        print(f"{name:20s} {err:.3e}")
    worst = max(results.values())
    print(f"max relative error {worst:.3e}")
    if not worst < TOLERANCE:
        print(f"gradient check failed: {worst:.3e} >= {TOLERANCE}", file=sys.stderr)
        return EXIT_SELFTEST
    return EXIT_OK


HANDLERS = {"predict": cmd_predict, "eval": cmd_eval, "augment": cmd_augment,
            "gradcheck": cmd_gradcheck, **{c: cmd_train for c in PHASES}}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lesionseg", description="Two-branch lesion segmentation")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--init", action="append", default=[],
                        help="checkpoint to start from (repeatable; trained branches are merged)")
    parser.add_argument("--random-init", action="store_true",
                        help="allow train-joint without pretrained branches")
    parser.add_argument("--threshold", type=float)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--data", help="dataset directory (overrides the config)")
    parser.add_argument("--count", type=int, default=4, help="number of augment previews")
    return parser


def run(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.threshold is not None and not 0.0 <= args.threshold <= 1.0:
            raise UsageError(f"--threshold {args.threshold} outside [0, 1]")
        if args.count < 1:
            raise UsageError("--count must be >= 1")
        cfg = resolve_config(args.config, args)
        _train_config(cfg)
        _policy(cfg)
        print(json.dumps(cfg, indent=2, sort_keys=True))
        return HANDLERS[args.command](args, cfg, Path(cfg["out_dir"]))
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, netpbm.NetpbmError, CheckpointError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
