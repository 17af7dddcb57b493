"""Command-line entry point: gen-data, train, eval, and visualize.

Exit codes are stable for scripting: 0 success, 1 runtime failure, 2 usage
error. All randomness flows from --seed; nothing reads the clock or the
environment for entropy. RMI_LOG_LEVEL in {error, info, debug} controls
verbosity; debug additionally enables per-operation NaN/Inf checks.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import (
    SPATIAL_LEXICON,
    GenConfig,
    GenerationError,
    ManifestError,
    generate_synthetic,
    length_histogram,
    load_manifest,
    split_samples,
    write_dataset,
)
from .evaluation import LONG_BUCKETS, SHORT_BUCKETS, evaluate, format_table
from .language import Vocabulary, encode
from .models import ModelConfig, predict_mask, response_map, save_grayscale_map
from .training import ModelCheckpoint, TrainConfig, TrainingDiverged, train

log = logging.getLogger("rmiseg")

# Config file / flag surface. Flags use dashes; keys use underscores.
_DIM_KEYS = tuple(ModelConfig().to_dict())
_TRAIN_KEYS = (
    "variant",
    "seed",
    "learning_rate",
    "weight_decay",
    "batch_size",
    "max_steps",
    "eval_every",
    "eval_samples",
) + _DIM_KEYS

_KEY_TYPES = {
    "variant": str,
    "seed": int,
    "learning_rate": float,
    "weight_decay": float,
    "batch_size": int,
    "max_steps": int,
    "eval_every": int,
    "eval_samples": int,
    **{k: int for k in _DIM_KEYS},
}


def parse_config_file(path) -> dict:
    """Plain-text ``key = value`` pairs; unknown keys are rejected."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, _, value = (part.strip() for part in line.partition("="))
            if key not in _TRAIN_KEYS:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                values[key] = _KEY_TYPES[key](value)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return values


def dump_config(config: TrainConfig) -> str:
    """Canonical dump; parsing it back reproduces the config exactly."""
    flat = config.to_dict()
    return "".join(f"{key} = {flat[key]}\n" for key in _TRAIN_KEYS)


def _vocab_path(checkpoint_path) -> Path:
    return Path(checkpoint_path).with_suffix(".vocab")


def _parse_range(text: str, what: str) -> tuple:
    try:
        if "-" in text:
            lo, hi = text.split("-", 1)
            lo, hi = int(lo), int(hi)
        else:
            lo = hi = int(text)
    except ValueError:
        raise ValueError(f"bad {what} range {text!r}, expected 'lo-hi'") from None
    if lo > hi:
        raise ValueError(f"bad {what} range {text!r}: {lo} > {hi}")
    return lo, hi


LENGTH_PROFILES = {"short": (2, 5), "medium": (5, 9), "long": (8, 12), "mixed": (2, 14)}


def _parse_buckets(text: str):
    if text == "short":
        return SHORT_BUCKETS
    if text == "long":
        return LONG_BUCKETS
    return tuple(_parse_range(part.strip(), "bucket") for part in text.split(","))


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    length_range = LENGTH_PROFILES.get(args.length_profile) or _parse_range(args.length_profile, "length")
    config = GenConfig(
        num_samples=args.num,
        objects=_parse_range(args.objects, "objects"),
        length_range=length_range,
        spatial_words=not args.no_spatial_words,
        canvas=args.canvas,
        train_frac=args.train_frac,
        val_frac=args.val_frac,
    )
    samples = generate_synthetic(args.seed, config)
    manifest = write_dataset(samples, args.out)
    histogram = length_histogram(samples)
    splits = {}
    for s in samples:
        splits[s.split] = splits.get(s.split, 0) + 1
    print(f"manifest: {manifest}")
    print(f"samples: {len(samples)}  splits: {json.dumps(splits, sort_keys=True)}")
    print("expression length histogram:")
    total = len(samples)
    for length, count in histogram.items():
        print(f"  {length:3d} words: {count:6d}  ({100 * count / total:.1f}%)")
    if not config.spatial_words:
        used = {w for s in samples for w in s.words}
        leaked = sorted(used & SPATIAL_LEXICON)
        if leaked:  # defensive: the grammar toggle should make this impossible
            raise GenerationError(f"spatial words leaked into corpus: {leaked}")
        print("spatial words: disabled (none present in corpus)")
    return 0


def _resolve_train_config(args, parser) -> TrainConfig:
    flat = TrainConfig().to_dict()
    if args.config:
        try:
            flat.update(parse_config_file(args.config))
        except (OSError, ValueError) as exc:
            parser.error(str(exc))
    overrides = {
        "variant": args.variant,
        "seed": args.seed,
        "learning_rate": args.lr,
        "weight_decay": args.weight_decay,
        "max_steps": args.steps,
        "eval_every": args.eval_every,
        "eval_samples": args.eval_samples,
        "image_size": args.image_size,
        "d_word": args.d_word,
        "d_sent": args.d_sent,
        "d_image": args.d_image,
        "cell_mlstm": args.cell_mlstm,
        "fusion_width": args.fusion_width,
    }
    flat.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return TrainConfig.from_dict(flat)
    except (TypeError, ValueError) as exc:
        parser.error(f"bad configuration: {exc}")


def cmd_train(args, parser) -> int:
    config = _resolve_train_config(args, parser)
    try:
        samples = load_manifest(args.data)
    except (OSError, ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    splits = split_samples(samples)
    train_split = splits["train"]
    holdout = splits["val"] or splits["test"]
    if not train_split:
        print("error: manifest has no train split", file=sys.stderr)
        return 1

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.ckpt"
    log_path = out_dir / "log.jsonl"

    with open(log_path, "w", encoding="utf-8") as log_file:

        def sink(record):
            log_file.write(json.dumps(record, sort_keys=True) + "\n")
            if record.get("type") == "step":
                log.info("step %d loss %.4f iou %s", record["step"], record["loss"], record.get("holdout_iou"))

        try:
            result = train(config, train_split, holdout, log_sink=sink)
        except TrainingDiverged as exc:
            diag_path = out_dir / "diverged.ckpt"
            exc.checkpoint.save(diag_path)
            print(f"error: {exc}; diagnostic checkpoint at {diag_path}", file=sys.stderr)
            return 1

    result.checkpoint.save(ckpt_path)
    result.vocab.save(_vocab_path(ckpt_path))
    print(f"checkpoint: {ckpt_path}")
    print(f"log: {log_path}")
    if np.isfinite(result.final_iou):
        print(f"final holdout IOU: {result.final_iou:.4f}")
    else:
        print("final holdout IOU: n/a (no holdout split)")
    return 0


def _load_checkpoint(path):
    checkpoint = ModelCheckpoint.load(path)
    vocab = Vocabulary.load(_vocab_path(path))
    if len(vocab) != checkpoint.vocab_size:
        raise ValueError(
            f"vocabulary size {len(vocab)} does not match checkpoint ({checkpoint.vocab_size})"
        )
    return checkpoint, vocab


def cmd_eval(args) -> int:
    try:
        checkpoint, vocab = _load_checkpoint(args.checkpoint)
        if args.variant and checkpoint.config.variant != args.variant:
            raise ValueError(
                f"variant mismatch: checkpoint is {checkpoint.config.variant!r}, requested {args.variant!r}"
            )
        samples = [s for s in load_manifest(args.data) if s.split == args.split]
        if not samples:
            raise ValueError(f"no samples with split {args.split!r} in {args.data}")
        buckets = _parse_buckets(args.buckets)
        report = evaluate(checkpoint, vocab, samples, buckets)
        named = [(Path(args.checkpoint).stem, report)]
        if args.compare:
            other_ckpt, other_vocab = _load_checkpoint(args.compare)
            other = evaluate(other_ckpt, other_vocab, samples, buckets)
            named.append((Path(args.compare).stem, other))
    except (OSError, ManifestError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(format_table(named))
    print(f"cumulative IOU: {report.cumulative_iou:.4f}  mean IOU: {report.mean_iou:.4f}")
    for threshold, frac in sorted(report.precision.items()):
        print(f"precision@{threshold:.1f}: {frac:.4f}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
        print(f"report: {args.out}")
    return 0


def cmd_visualize(args) -> int:
    try:
        checkpoint, vocab = _load_checkpoint(args.checkpoint)
        if checkpoint.config.variant != "rmi":
            raise ValueError("visualize needs an rmi checkpoint: the baseline has no per-word grid state")
        samples = load_manifest(args.data)
        if not 0 <= args.index < len(samples):
            raise ValueError(f"sample index {args.index} outside dataset of {len(samples)}")
        sample = samples[args.index]
        expression = args.expr if args.expr else sample.expression
        seq = encode(expression, vocab)
    except (OSError, ManifestError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    model = checkpoint.build_model()
    size = checkpoint.config.dims.image_size
    grids, seg = model.forward_steps(sample.image, seq)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for t, grid in enumerate(grids, start=1):
        path = out_dir / f"word_{t:02d}.pgm"
        save_grayscale_map(path, response_map(grid, size, size).data)
        written.append(path)
    mask_path = out_dir / "mask.pgm"
    save_grayscale_map(mask_path, predict_mask(seg, size, size).astype(np.float64))
    written.append(mask_path)
    print(f"expression: {expression!r} ({len(seq)} words)")
    for path in written:
        print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_train_flags(sub):
    sub.add_argument("--variant", choices=("baseline", "rmi"), default=None, help="model variant (default rmi)")
    sub.add_argument("--config", default=None, help="key = value config file; flags override it")
    sub.add_argument("--data", required=True, help="dataset manifest (JSON lines)")
    sub.add_argument("--out", default="run", help="output directory (default run/)")
    sub.add_argument("--seed", type=int, default=None, help="RNG seed (default 0)")
    sub.add_argument("--lr", type=float, default=None, help="learning rate (default 0.00025)")
    sub.add_argument("--weight-decay", type=float, default=None, help="L2 coefficient (default 0.0005)")
    sub.add_argument("--steps", type=int, default=None, help="training steps (default 20000)")
    sub.add_argument("--eval-every", type=int, default=None, help="holdout eval period (default 1000)")
    sub.add_argument("--eval-samples", type=int, default=None, help="max holdout samples per eval (default 200)")
    sub.add_argument("--image-size", type=int, default=None, help="square image extent (default 64)")
    sub.add_argument("--d-word", type=int, default=None, help="word embedding size (default 32)")
    sub.add_argument("--d-sent", type=int, default=None, help="language LSTM cell size (default 64)")
    sub.add_argument("--d-image", type=int, default=None, help="visual feature channels (default 32)")
    sub.add_argument("--cell-mlstm", type=int, default=None, help="multimodal LSTM cell size (default 64)")
    sub.add_argument("--fusion-width", type=int, default=None, help="baseline fusion width (default cell-mlstm)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rmiseg",
        description="Referring image segmentation at desk scale: synthetic data, training, metrics, per-word maps.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    gen = subs.add_parser("gen-data", help="generate a synthetic referring-segmentation dataset")
    gen.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--num", type=int, required=True, help="number of samples (> 0)")
    gen.add_argument("--objects", default="2-4", help="objects per scene, 'lo-hi' (default 2-4)")
    gen.add_argument(
        "--length-profile",
        default="mixed",
        help="target expression lengths: short|medium|long|mixed or 'lo-hi' (default mixed)",
    )
    gen.add_argument("--no-spatial-words", action="store_true", help="disable location words in the grammar")
    gen.add_argument("--train-frac", type=float, default=0.8, help="train fraction (default 0.8)")
    gen.add_argument("--val-frac", type=float, default=0.0, help="val fraction (default 0.0)")
    gen.add_argument("--canvas", type=int, default=64, help="canvas extent, divisible by 8 (default 64)")

    tr = subs.add_parser("train", help="train a model variant on a dataset manifest")
    _add_train_flags(tr)

    ev = subs.add_parser("eval", help="evaluate a checkpoint and print the break-down table")
    ev.add_argument("--checkpoint", required=True, help="checkpoint file from train")
    ev.add_argument("--data", required=True, help="dataset manifest")
    ev.add_argument("--split", default="test", choices=("train", "val", "test"), help="split to score (default test)")
    ev.add_argument("--variant", choices=("baseline", "rmi"), default=None, help="assert the checkpoint variant")
    ev.add_argument("--buckets", default="short", help="length buckets: short|long or '1-2,3,4-5,6-20' (default short)")
    ev.add_argument("--compare", default=None, help="second checkpoint; adds its rows and the relative-gain row")
    ev.add_argument("--out", default=None, help="write the metrics report JSON here")

    vis = subs.add_parser("visualize", help="write per-word response maps and the predicted mask")
    vis.add_argument("--checkpoint", required=True, help="rmi checkpoint file")
    vis.add_argument("--data", required=True, help="dataset manifest")
    vis.add_argument("--index", type=int, default=0, help="sample index in the manifest (default 0)")
    vis.add_argument("--expr", default=None, help="override the sample's expression")
    vis.add_argument("--out", default="viz", help="output directory (default viz/)")
    return parser


def _setup_logging() -> None:
    level_name = os.environ.get("RMI_LOG_LEVEL", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level_name not in levels:
        print(f"warning: unknown RMI_LOG_LEVEL {level_name!r}, using info", file=sys.stderr)
        level_name = "info"
    logging.basicConfig(level=levels[level_name], format="%(levelname)s %(name)s: %(message)s")
    if level_name == "debug":
        T.set_debug_checks(True)


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "gen-data":
        if args.num < 1:
            parser.error("--num must be positive")
        try:
            _parse_range(args.objects, "objects")
            if args.length_profile not in LENGTH_PROFILES:
                _parse_range(args.length_profile, "length")
        except ValueError as exc:
            parser.error(str(exc))
        try:
            return cmd_gen_data(args)
        except (GenerationError, ValueError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
    if args.command == "train":
        return cmd_train(args, parser)
    if args.command == "eval":
        return cmd_eval(args)
    if args.command == "visualize":
        return cmd_visualize(args)
    parser.error(f"unknown command {args.command!r}")  # pragma: no cover
    return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
