"""Command-line entry point: ``easter <verb> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
Machine-readable output (TSV) goes to stdout, human-readable text to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import augment as aug
from .ctc import Vocabulary
from .datagen import GeneratorConfig, generate_dataset, num_workers, read_manifest
from .errors import EasterError
from .images import read_image, write_pgm
from .metrics import evaluate
from .model import (
    PRESETS,
    ModelConfig,
    analytic_param_count,
    architecture_rows,
    block_param_counts,
    load_checkpoint,
    transcribe,
)
from .trainer import TrainingConfig, fit

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("easter")


class _Failure(Exception):
    """Runtime failure already reported per item; maps to exit code 1."""


def _existing_file(value: str) -> Path:
    path = Path(value)
    if not path.is_file():
        raise argparse.ArgumentTypeError(f"no such file: {value}")
    return path


def _emit(rows, out=None) -> None:
    w = csv.writer(out or sys.stdout, delimiter="\t", lineterminator="\n")
    for r in rows:
        w.writerow(r)


# -- gen-data ----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    d = json.loads(args.config.read_text(encoding="utf-8"))
    if args.out is not None:
        d["output_dir"] = str(args.out)
    elif "output_dir" in d:
        # paths inside a config file are relative to that file
        d["output_dir"] = str(args.config.parent / d["output_dir"])
    if args.seed is not None:
        d["seed"] = args.seed
    if args.size is not None:
        d["size"] = args.size
    config = GeneratorConfig.from_dict(d)
    manifest = generate_dataset(config, args.workers or num_workers())
    print(f"wrote {config.size} samples to {manifest}", file=sys.stderr)
    _emit([["manifest", str(manifest)], ["samples", config.size]])
    return EXIT_OK


# -- augment-preview -----------------------------------------------------------


def cmd_augment_preview(args) -> int:
    if args.pipeline is None:
        pipeline = aug.default_pipeline()
    else:
        d = json.loads(args.pipeline.read_text(encoding="utf-8"))
        # accept a bare pipeline or a training config that embeds one
        d = d.get("augment", d) if "ops" not in d else d
        pipeline = aug.default_pipeline() if d == "default" else aug.AugmentPipeline.from_dict(d)
    image = read_image(args.input)
    args.out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(args.count):
        out = aug.apply(pipeline, image, [args.seed, i])
        path = args.out / f"{args.input.stem}_aug{i:03d}.pgm"
        write_pgm(path, out)
        rows.append([str(path), out.shape[0], out.shape[1]])
    _emit(rows)
    return EXIT_OK


# -- train -----------------------------------------------------------------------


def cmd_train(args) -> int:
    config = TrainingConfig.load(args.config)
    if args.max_steps is not None:
        config.max_steps = args.max_steps
    try:
        result = fit(config, resume=args.resume)
    except KeyboardInterrupt:
        print(f"interrupted; resume with: easter train --config {args.config} --resume", file=sys.stderr)
        return EXIT_FAIL
    state = result.state
    print(f"finished at step {state.step}; best checkpoint {result.best_checkpoint}", file=sys.stderr)
    if state.skipped:
        print(f"skipped {state.skipped} samples with infeasible alignments", file=sys.stderr)
    _emit([
        ["best_checkpoint", str(result.best_checkpoint)],
        ["metrics", str(result.metrics_path)],
        ["steps", state.step],
        ["skipped", state.skipped],
    ])
    return EXIT_OK


# -- eval ------------------------------------------------------------------------


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    records = read_manifest(args.manifest)
    images = [read_image(r.path) for r in records]
    hyps = transcribe(model, images, args.batch_size)
    report = evaluate([r.text for r in records], hyps, [r.sample_id for r in records], args.fold_case)
    args.out.mkdir(parents=True, exist_ok=True)
    report.write(args.out / "eval_report.json", args.out / "eval_samples.tsv")
    s = report.summary()
    print(
        f"{s['samples']} samples: CER {s['cer']:.4f}  WER {s['wer']:.4f}  "
        f"word accuracy {s['word_accuracy']:.4f}  exact match {s['exact_match']:.4f}",
        file=sys.stderr,
    )
    _emit([[k, v] for k, v in s.items()])
    return EXIT_OK


# -- transcribe ----------------------------------------------------------------------


def cmd_transcribe(args) -> int:
    model = load_checkpoint(args.checkpoint)
    if args.input.is_dir():
        paths = sorted(p for p in args.input.iterdir() if p.is_file() and not p.name.startswith("."))
    elif args.input.is_file():
        paths = [args.input]
    else:
        print(f"error: no such file or directory: {args.input}", file=sys.stderr)
        return EXIT_FAIL
    failed = 0
    for path in paths:
        try:
            image = read_image(path)
        except EasterError as exc:
            failed += 1
            print(f"error: {exc}", file=sys.stderr)
            continue
        _emit([[str(path), transcribe(model, [image])[0]]])
    return EXIT_FAIL if failed else EXIT_OK


# -- inspect -------------------------------------------------------------------------


def _inspect_config(args) -> ModelConfig:
    if args.checkpoint is not None:
        return load_checkpoint(args.checkpoint).config
    vocab = Vocabulary.named(args.vocab) if args.vocab else None
    if args.config is None:
        return PRESETS[args.preset](vocab or Vocabulary.alnum())
    d = json.loads(args.config.read_text(encoding="utf-8"))
    if "train_manifest" in d:  # a training config
        vocab = vocab or Vocabulary.named(d.get("vocab", "printed"))
        d = d.get("model", {"preset": "3x3"})
    return ModelConfig.from_dict(d, vocab)


def cmd_inspect(args) -> int:
    config = _inspect_config(args)
    per_block = block_param_counts(config)
    rows = architecture_rows(config)
    total = analytic_param_count(config)
    header = ["block", "sub_blocks", "kernel", "filters", "dropout", "dilation", "stride", "params"]
    _emit([header] + [[*r.values(), per_block[r["block"]]] for r in rows]
          + [["total", config.num_layers, "", "", "", "", "", total]])
    print(f"model {config.name}: {config.num_layers} layers, {len(config.vocab.chars)}-character vocabulary", file=sys.stderr)
    print(f"{'block':<16}{'subs':>5}{'K':>4}{'filters':>9}{'drop':>6}{'dil':>5}{'stride':>7}{'params':>11}", file=sys.stderr)
    for r in rows:
        print(
            f"{r['block']:<16}{r['sub_blocks']:>5}{r['kernel']:>4}{r['filters']:>9}{r['dropout']:>6}"
            f"{r['dilation']:>5}{r['stride']:>7}{per_block[r['block']]:>11,}",
            file=sys.stderr,
        )
    print(f"trainable parameters: {total:,}", file=sys.stderr)
    return EXIT_OK


# -- export-plot -----------------------------------------------------------------------


def _read_metrics(path: Path) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise _Failure(f"{path}: no metric rows")

    def col(name):
        return np.array([float(r[name]) if r.get(name) not in (None, "") else np.nan for r in rows])

    return {"step": col("step"), "train_loss": col("train_loss"), "val_cer": col("val_cer")}


def cmd_export_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = args.labels or [p.parent.name or p.stem for p in args.metrics]
    if len(labels) != len(args.metrics):
        raise _Failure("--labels must match the number of --metrics files")
    runs = [_read_metrics(p) for p in args.metrics]
    fig, (ax_loss, ax_cer) = plt.subplots(1, 2, figsize=(10, 4))
    for label, m in zip(labels, runs):
        ax_loss.plot(m["step"], m["train_loss"], label=label)
        ax_cer.plot(m["step"], m["val_cer"], label=label)
    ax_loss.set(xlabel="step", ylabel="train loss", title="Training loss")
    ax_cer.set(xlabel="step", ylabel="CER", title="Validation CER")
    for ax in (ax_loss, ax_cer):
        ax.grid(alpha=0.3)
        ax.legend()
    fig.tight_layout()
    args.out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(args.out, format="svg")
    plt.close(fig)
    _emit([["plot", str(args.out)]])
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="easter", description="Fully convolutional text recognition with CTC.")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="verb", required=True, metavar="VERB")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset", description="Render a seeded synthetic dataset.")
    p.add_argument("--config", type=_existing_file, required=True, help="generator config JSON")
    p.add_argument("--out", type=Path, help="output directory (overrides the config)")
    p.add_argument("--seed", type=int, help="seed (overrides the config)")
    p.add_argument("--size", type=int, help="number of samples (overrides the config)")
    p.add_argument("--workers", type=int, help="worker processes (default: EASTER_NUM_WORKERS or 1)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("augment-preview", help="write augmented variants of an image",
                       description="Apply an augmentation pipeline to one image several times.")
    p.add_argument("--input", type=_existing_file, required=True, help="source image")
    p.add_argument("--out", type=Path, required=True, help="directory for the PGM previews")
    p.add_argument("--pipeline", type=_existing_file, help="pipeline JSON or training config (default pipeline if omitted)")
    p.add_argument("--count", type=int, default=8, help="number of variants")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_augment_preview)

    p = sub.add_parser("train", help="train a model", description="Train against (weighted) CTC.")
    p.add_argument("--config", type=_existing_file, required=True, help="training config JSON")
    p.add_argument("--resume", action="store_true", help="continue from the state file in checkpoint_dir")
    p.add_argument("--max-steps", type=int, help="override max_steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a manifest", description="Greedy-decode and report CER/WER.")
    p.add_argument("--checkpoint", type=_existing_file, required=True)
    p.add_argument("--manifest", type=_existing_file, required=True)
    p.add_argument("--out", type=Path, default=Path("."), help="directory for eval_report.json and eval_samples.tsv")
    p.add_argument("--fold-case", action="store_true", help="compare case-insensitively")
    p.add_argument("--batch-size", type=int, default=32)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("transcribe", help="transcribe images", description="Print 'path<TAB>text' per image.")
    p.add_argument("--checkpoint", type=_existing_file, required=True)
    p.add_argument("--input", type=Path, required=True, help="image file or directory of images")
    p.set_defaults(func=cmd_transcribe)

    p = sub.add_parser("inspect", help="print the architecture table", description="Architecture table and parameter count.")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--checkpoint", type=_existing_file)
    src.add_argument("--config", type=_existing_file, help="model or training config JSON")
    src.add_argument("--preset", choices=sorted(PRESETS), default="3x3")
    p.add_argument("--vocab", help="'alnum', 'printed' or a literal character set")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("export-plot", help="plot metrics CSVs to SVG", description="Overlay loss and CER curves.")
    p.add_argument("--metrics", type=_existing_file, nargs="+", required=True)
    p.add_argument("--out", type=Path, required=True, help="SVG path")
    p.add_argument("--labels", nargs="+", help="legend labels, one per metrics file")
    p.set_defaults(func=cmd_export_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (EasterError, _Failure, ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
