"""Command-line entry point: train, eval, predict, inspect and sweep."""

from __future__ import annotations

import argparse
import asyncio
import csv
import dataclasses
import json
import logging
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

import numpy as np
from dotenv import load_dotenv

from ._internal.idx import load_dataset, split_train_val, take_subset
from ._internal.losses import softmax
from .classifier import PepsClassifier
from .config import RunConfig, TrainConfig, build_configs, load_config_file
from .exceptions import PepsCheckpointError, PepsError
from .trainer import Trainer
from .types import Dataset, FeatureMapKind, FloatArray, Split

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
MLP_HIDDEN = 1000
SWEEP_HEADER = ["D", "chi", "parameters", "best_val_acc", "test_acc_at_best_val", "train_acc"]

# Flag destinations that map one-to-one onto config keys.
_FLAG_KEYS = {
    "data_dir": "data_dir",
    "out": "out_dir",
    "checkpoint": "checkpoint",
    "d": "bond_dim",
    "chi": "chi",
    "lr": "learning_rate",
    "batch": "batch_size",
    "epochs": "epochs",
    "seed": "seed",
    "feature": "feature_map",
    "optimizer": "optimizer",
    "contraction": "contraction",
    "dataset": "dataset",
    "subset": "subset",
    "workers": "workers",
}


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def _int_list(value: str) -> list[int]:
    try:
        return [int(part) for part in value.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {value!r}") from None


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="flat YAML config file")
    parser.add_argument("--data-dir", type=Path, help="dataset root (default: $PEPSNET_DATA_DIR or ./data)")
    parser.add_argument("--out", type=Path, help="output directory for metrics and checkpoints")
    parser.add_argument("--checkpoint", type=Path, help="checkpoint path")
    parser.add_argument("--d", type=int, help="PEPS bond dimension D")
    parser.add_argument("--chi", type=int, help="boundary-MPS bond dimension")
    parser.add_argument("--lr", type=float, help="learning rate")
    parser.add_argument("--batch", type=int, help="batch size")
    parser.add_argument("--epochs", type=int, help="number of epochs")
    parser.add_argument("--seed", type=int, help="random seed")
    parser.add_argument("--feature", choices=[k.value for k in FeatureMapKind], help="feature map")
    parser.add_argument("--positivity", type=_on_off, help="positivity projection (on|off)")
    parser.add_argument("--optimizer", choices=["sgd", "adam"], help="update rule")
    parser.add_argument("--contraction", choices=["boundary", "exact"], help="contraction method")
    parser.add_argument("--dataset", choices=["mnist", "fashion-mnist"], help="dataset")
    parser.add_argument("--subset", type=int, help="training images to use")
    parser.add_argument("--workers", type=int, help="concurrent samples")
    parser.add_argument("--debug", action="store_true", help="enable debug logging")
    parser.add_argument("--no-progress", action="store_true", help="disable progress bars")


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with one subcommand per operation."""
    parser = argparse.ArgumentParser(prog="pepsnet", description="PEPS tensor-network image classifier")
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="train a classifier")
    _add_common(train)

    evaluate = commands.add_parser("eval", help="evaluate a checkpoint on one split")
    _add_common(evaluate)
    evaluate.add_argument("--split", choices=[s.value for s in Split], default=Split.TEST.value)

    predict = commands.add_parser("predict", help="classify one image")
    _add_common(predict)
    source = predict.add_mutually_exclusive_group(required=True)
    source.add_argument("--image", type=Path, help="image file (converted to grayscale)")
    source.add_argument("--index", type=int, help="index into the chosen split")
    predict.add_argument("--split", choices=[s.value for s in Split], default=Split.TEST.value)

    inspect = commands.add_parser("inspect", help="describe a checkpoint")
    _add_common(inspect)

    sweep = commands.add_parser("sweep", help="train one model per (D, chi) pair")
    _add_common(sweep)
    sweep.add_argument("--bond-dims", type=_int_list, default=[1, 2, 3], help="comma-separated D values")
    sweep.add_argument("--chis", type=_int_list, default=[10], help="comma-separated chi values")
    return parser


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    values = {key: getattr(args, dest) for dest, key in _FLAG_KEYS.items()}
    values["positivity"] = args.positivity
    if args.debug:
        values["debug"] = True
    if args.no_progress:
        values["progress"] = False
    return values


def resolve_configs(args: argparse.Namespace) -> tuple[TrainConfig, RunConfig, dict[str, Any]]:
    """Merge the config file and the flags (flags win).

    Returns:
        Train config, run config, and the explicitly given key/values.
    """
    file_values = load_config_file(args.config) if args.config else {}
    flag_values = _overrides(args)
    train, run = build_configs(file_values, flag_values)
    given = {**file_values, **{k: v for k, v in flag_values.items() if v is not None}}
    return train, run, given


def load_splits(train_config: TrainConfig, run: RunConfig) -> tuple[Dataset, Dataset, Dataset]:
    """Official train/test files, the seeded validation split and any subsets."""
    full = load_dataset(run.data_dir, run.dataset, Split.TRAIN)
    train, val = split_train_val(full, min(run.val_count, len(full) - 1), train_config.seed)
    test = load_dataset(run.data_dir, run.dataset, Split.TEST)
    seed = train_config.seed
    if run.subset is not None:
        train = take_subset(train, run.subset, seed, run.stratify)
    if run.val_subset is not None:
        val = take_subset(val, run.val_subset, seed, run.stratify)
    if run.test_subset is not None:
        test = take_subset(test, run.test_subset, seed, run.stratify)
    logger.info(f"Splits: {len(train)} train, {len(val)} val, {len(test)} test")
    return train, val, test


def _pick_split(split: Split, splits: tuple[Dataset, Dataset, Dataset]) -> Dataset:
    train, val, test = splits
    return {Split.TRAIN: train, Split.VAL: val, Split.TEST: test}[split]


def _load_model(path: Path, given: dict[str, Any]) -> PepsClassifier:
    """Checkpoint with explicitly given train settings applied on top of its stored config."""
    model = PepsClassifier.load(path)
    changes = {k: v for k, v in given.items() if k in {f.name for f in dataclasses.fields(TrainConfig)}}
    if not changes:
        return model
    try:
        config = dataclasses.replace(model.config, **changes)
    except TypeError as e:
        raise PepsCheckpointError(str(e)) from e
    return model.with_config(config)


def read_image(path: Path, side: int) -> FloatArray:
    """Grayscale pixels in [0, 1], resized to ``side`` × ``side`` when needed."""
    from PIL import Image

    with Image.open(path) as image:
        gray = image.convert("L")
        if gray.size != (side, side):
            gray = gray.resize((side, side), resample=Image.Resampling.LANCZOS)
        return np.asarray(gray, dtype=np.float64) / 255.0


# =============================================================================
# Commands
# =============================================================================


async def run_train(train_config: TrainConfig, run: RunConfig, trainer: Trainer) -> int:
    splits = load_splits(train_config, run)
    model = PepsClassifier.create(train_config, image_side=splits[0].images.shape[1])
    result = await trainer.fit(
        model,
        *splits,
        metrics_path=run.out_dir / "metrics.csv",
        checkpoint_path=run.checkpoint_path,
        run_config=run.to_dict(),
    )
    if result.best_epoch:
        print(
            f"best val acc {result.best_val_acc:.4f} at epoch {result.best_epoch}; "
            f"test acc {result.test_acc_at_best:.4f}"
        )
    else:
        print(f"wrote initial checkpoint {run.checkpoint_path}")
    return EXIT_OK


async def run_eval(train_config: TrainConfig, run: RunConfig, trainer: Trainer, args: argparse.Namespace) -> int:
    model = _load_model(run.checkpoint_path, args.given)
    dataset = _pick_split(Split(args.split), load_splits(train_config, run))
    metrics = await trainer.evaluate(model, dataset)
    print(f"{args.split}: accuracy {metrics.accuracy:.4f}, mean loss {metrics.mean_loss:.6f} ({metrics.count} images)")
    return EXIT_OK


async def run_predict(train_config: TrainConfig, run: RunConfig, args: argparse.Namespace) -> int:
    model = _load_model(run.checkpoint_path, args.given)
    if args.image is not None:
        image = read_image(args.image, model.image_side)
    else:
        dataset = _pick_split(Split(args.split), load_splits(train_config, run))
        image = dataset.images[args.index]
    probs = softmax(model.logits(image))
    for label, p in enumerate(probs):
        print(f"{label}: {p:.6f}")
    print(f"predicted: {int(np.argmax(probs))}")
    return EXIT_OK


def mlp_parameter_count(inputs: int, hidden: int = MLP_HIDDEN, outputs: int = 10) -> int:
    """Weights and biases of an inputs-hidden-outputs perceptron."""
    return inputs * hidden + hidden + hidden * outputs + outputs


async def run_inspect(run: RunConfig, args: argparse.Namespace) -> int:
    model = _load_model(run.checkpoint_path, args.given)
    summary = model.describe()
    if model.config.feature_map is FeatureMapKind.PRODUCT:
        summary["mlp_reference_parameters"] = mlp_parameter_count(model.image_side**2, outputs=model.grid.label_count)
    for key, value in summary.items():
        print(f"{key}: {value}")
    return EXIT_OK


async def run_sweep(
    train_config: TrainConfig,
    run: RunConfig,
    trainer_factory: type[Trainer],
    bond_dims: Sequence[int],
    chis: Sequence[int],
) -> int:
    """Train one model per (D, χ) pair on the same splits and write ``sweep.csv``."""
    splits = load_splits(train_config, run)
    rows: list[list[str]] = []
    for bond_dim in bond_dims:
        for chi in chis:
            config = dataclasses.replace(train_config, bond_dim=bond_dim, chi=chi)
            trainer = trainer_factory(config, workers=run.workers, progress=run.progress)
            model = PepsClassifier.create(config, image_side=splits[0].images.shape[1])
            tag = f"D{bond_dim}_chi{chi}"
            result = await trainer.fit(
                model,
                *splits,
                metrics_path=run.out_dir / f"metrics_{tag}.csv",
                checkpoint_path=run.out_dir / f"model_{tag}.peps",
                run_config=run.to_dict(),
            )
            rows.append(
                [
                    str(bond_dim),
                    str(chi),
                    str(model.parameter_count()),
                    repr(result.best_val_acc),
                    repr(result.test_acc_at_best),
                    repr(result.final_train_acc),
                ]
            )
            logger.info(f"Sweep {tag}: best val {result.best_val_acc:.4f}, test {result.test_acc_at_best:.4f}")

    run.out_dir.mkdir(parents=True, exist_ok=True)
    with (run.out_dir / "sweep.csv").open("w", newline="", encoding="utf-8") as f:
        f.write(f"# config: {json.dumps(train_config.to_dict(), sort_keys=True)}\n")
        writer = csv.writer(f)
        writer.writerow(SWEEP_HEADER)
        writer.writerows(rows)
    return EXIT_OK


async def _dispatch(args: argparse.Namespace, train_config: TrainConfig, run: RunConfig) -> int:
    trainer = Trainer(train_config, workers=run.workers, progress=run.progress)
    match args.command:
        case "train":
            return await run_train(train_config, run, trainer)
        case "eval":
            return await run_eval(train_config, run, trainer, args)
        case "predict":
            return await run_predict(train_config, run, args)
        case "inspect":
            return await run_inspect(run, args)
        case "sweep":
            return await run_sweep(train_config, run, Trainer, args.bond_dims, args.chis)
    raise AssertionError(f"unhandled command {args.command}")


def main(argv: Sequence[str] | None = None) -> int:
    """Run the command line; returns the process exit status."""
    load_dotenv()
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.debug else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        train_config, run, args.given = resolve_configs(args)
        return asyncio.run(_dispatch(args, train_config, run))
    except PepsError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
