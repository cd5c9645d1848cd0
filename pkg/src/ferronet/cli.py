"""Command-line entry point: ``ferronet <subcommand> ...``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import shutil
import sys
import typing
from pathlib import Path

from .checkpoint import load_checkpoint
from .data import (
    NormalizationStats,
    find_cifar10_files,
    load_cifar10_binary,
    mini_cifar10_indices,
    synthetic_cifar10,
    write_cifar10_binary,
)
from .errors import CheckpointError, ConfigError, ContractError, DataError, NumericalError
from .featuremaps import dump_feature_maps
from .losses import LossConfig
from .models import ModelConfig
from .train import MINI_TRAIN_FILE, TrainConfig, evaluate, load_datasets, run_ablation, train

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3
_SECTIONS = {"model": ModelConfig, "loss": LossConfig}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON file supplying any TrainConfig field; flags override it")
    groups = [(None, TrainConfig)] + list(_SECTIONS.items())
    for section, cls in groups:
        hints = typing.get_type_hints(cls)
        for f in dataclasses.fields(cls):
            if f.name in _SECTIONS:
                continue
            dest = f.name if section is None else f"{section}.{f.name}"
            hint = hints[f.name]
            kwargs = dict(dest=dest, default=argparse.SUPPRESS)
            if hint is not bool:
                kwargs["metavar"] = f.name.upper()
            args = typing.get_args(hint)
            if hint is bool:
                kwargs["action"] = argparse.BooleanOptionalAction
            elif typing.get_origin(hint) is tuple:
                kwargs.update(nargs="*", type=int)
            else:
                base = next((a for a in args if a is not type(None)), hint) if args else hint
                kwargs["type"] = base
            parser.add_argument(_flag(f.name), **kwargs)


def config_from_args(args: argparse.Namespace) -> TrainConfig:
    raw: dict = {"model": {}, "loss": {}}
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{args.config}: expected a JSON object")
        for key, value in loaded.items():
            if key in _SECTIONS:
                raw[key].update(value)
            else:
                raw[key] = value
    for key, value in vars(args).items():
        if key in ("command", "config", "func", "jobs", "verbose"):
            continue
        section, _, name = key.rpartition(".")
        if section:
            raw[section][name] = value
        else:
            raw[key] = value
    try:
        raw["model"] = ModelConfig(**raw["model"])
        raw["loss"] = LossConfig(**raw["loss"])
    except (TypeError, ContractError) as exc:
        raise ConfigError(str(exc)) from exc
    return TrainConfig.from_dict(raw)


# ----------------------------------------------------------------- subcommands
def cmd_prepare_data(args) -> int:
    train_paths, test_path = find_cifar10_files(args.raw)
    full = load_cifar10_binary(train_paths, "train")
    idx = mini_cifar10_indices(full.class_labels, args.per_class, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_cifar10_binary(out / MINI_TRAIN_FILE, full.images[idx], full.class_labels[idx])
    shutil.copyfile(test_path, out / "test_batch.bin")
    (out / "mini_indices.json").write_text(json.dumps(
        {"seed": args.seed, "per_class": args.per_class, "indices": idx.tolist()}) + "\n")
    print(json.dumps({"train_images": int(len(idx)), "out": str(out)}))
    return 0


def cmd_synth_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    images, labels = synthetic_cifar10(args.per_class, args.seed)
    write_cifar10_binary(out / MINI_TRAIN_FILE, images, labels)
    test_images, test_labels = synthetic_cifar10(args.test_per_class, args.seed + 1)
    write_cifar10_binary(out / "test_batch.bin", test_images, test_labels)
    print(json.dumps({"train_images": len(labels), "test_images": len(test_labels), "out": str(out)}))
    return 0


def cmd_train(args) -> int:
    report = train(config_from_args(args))
    print(json.dumps({
        "final_test_acc": report.final_test_acc,
        "best_test_acc": report.best_test_acc,
        "param_count": report.param_count,
        "checkpoint": str(report.checkpoint_path),
        "metrics": str(report.metrics_path),
    }))
    return 0


def cmd_eval(args) -> int:
    model, header = load_checkpoint(args.checkpoint)
    meta = header.get("meta", {})
    cfg_raw = dict(meta.get("config") or {})
    if args.data_dir:
        cfg_raw["data_dir"] = args.data_dir
    cfg_raw.setdefault("output_dir", "unused")
    config = TrainConfig.from_dict(cfg_raw)
    _, test = load_datasets(config)
    if test is None:
        raise DataError("no test split found for evaluation")
    norm = meta.get("normalization")
    stats = NormalizationStats(tuple(norm["mean"]), tuple(norm["std"])) if norm else None
    print(json.dumps({"accuracy": evaluate(model, test, stats), "images": len(test)}))
    return 0


def cmd_ablate(args) -> int:
    rows = run_ablation(config_from_args(args), jobs=args.jobs)
    for row in rows:
        print(json.dumps(dataclasses.asdict(row)))
    return 0


def cmd_inspect(args) -> int:
    report = dump_feature_maps(args.checkpoint, args.image, args.stage, args.out)
    summary = {k: report[k] for k in ("stage", "shape", "channel_mean_std", "active_fraction")}
    print(json.dumps(summary))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ferronet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="build mini-CIFAR-10 from the raw binary batches")
    p.add_argument("--raw", required=True, help="directory holding data_batch_*.bin and test_batch.bin")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("synth-data", help="write a synthetic CIFAR-format dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--test-per-class", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train one configuration")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="test accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the model x augmentation x loss grid")
    _add_config_flags(p)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect", help="dump one stage's feature maps as PGM files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="binary PPM (P6) image")
    p.add_argument("--stage", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    verbose = args.__dict__.pop("verbose")
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    func = args.__dict__.pop("func")
    try:
        return func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ContractError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
