"""Command-line front end: one executable covering the whole pipeline.

Subcommands mirror the workflow order: ingest or synth a corpus,
preprocess or featurize it, train, then evaluate, sweep, predict, plot,
or export embeddings.  Settings come from an optional JSON config file
with sections dataset/dsp/scalogram/model/train/eval; command flags win
over the file.  Exit codes: 0 success, 1 usage error, 2 data error,
3 numeric failure.  Logs go to stderr so artifact streams stay clean.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from .dsp import SegmentPolicy, preprocess
from .errors import DataError, LungsoundError, NumericError, UsageError
from .evaluation import TaskId, gamma_sweep, report, task_class_names
from .ingest import (build_manifest, load_manifest, load_wav, parse_label,
                     save_manifest, stratified_split, write_wav)
from .model import ModelConfig, export_embeddings
from .scalogram import (MorseParams, cwt, load_scalogram, power_scalogram,
                        render_image, select_scales)
from .synth import synthesize_corpus
from .trainer import (TrainConfig, checkpoint_load, evaluate, featurize,
                      load_batch, predict, train_task)

log = logging.getLogger("lungsound.cli")

_CACHE_ENV = "LUNGSOUND_CACHE"


# ---------------------------------------------------------------------------
# run configuration

_SECTION_KEYS = {
    "dataset": ("root", "manifest"),
    "dsp": tuple(f.name for f in dataclasses.fields(SegmentPolicy)),
    "scalogram": tuple(f.name for f in dataclasses.fields(MorseParams)),
    "model": None,  # ModelConfig.from_dict rejects unknowns itself
    "train": None,  # TrainConfig.from_dict likewise
    "eval": ("task", "gamma"),
}


def load_run_config(path=None) -> dict:
    """Parse the JSON run config, rejecting unknown sections and keys."""
    if not path:
        return {}
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    for section, body in doc.items():
        if section not in _SECTION_KEYS:
            raise UsageError(f"unknown config section: {section}")
        if not isinstance(body, dict):
            raise UsageError(f"config section {section} must be an object")
        allowed = _SECTION_KEYS[section]
        if allowed is not None:
            for key in body:
                if key not in allowed:
                    raise UsageError(f"unknown config key: {section}.{key}")
    return doc


def _policy(config: dict) -> SegmentPolicy:
    return SegmentPolicy(**config.get("dsp", {}))


def _morse(config: dict) -> MorseParams:
    return MorseParams(**config.get("scalogram", {}))


def _train_config(config: dict, args) -> TrainConfig:
    doc = dict(config.get("train", {}))
    task = getattr(args, "task", None) or doc.get("task") \
        or config.get("eval", {}).get("task")
    if task is None:
        raise UsageError("no task given; pass --task or set train.task in the config")
    doc["task"] = TaskId.parse(task).value
    for flag in ("epochs", "batch_size", "learning_rate", "gamma", "seed",
                 "checkpoint_dir"):
        value = getattr(args, flag, None)
        if value is not None:
            doc[flag] = value
    return TrainConfig.from_dict(doc)


def _model_config(config: dict, args, n_classes: int) -> ModelConfig:
    if getattr(args, "toy", False):
        return ModelConfig.toy(n_classes)
    doc = dict(config.get("model", {}))
    doc["n_classes"] = n_classes
    return ModelConfig.from_dict(doc)


def _cache_dir(args) -> str:
    explicit = getattr(args, "cache_dir", None)
    if explicit:
        return explicit
    from_env = os.environ.get(_CACHE_ENV)
    if from_env:
        return from_env
    raise UsageError(
        f"no scalogram cache location; pass --cache-dir or set {_CACHE_ENV}")


def _write_or_print(text: str, out) -> None:
    if out:
        with open(out, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# subcommands

def _cmd_ingest(args, config) -> int:
    root = args.root or config.get("dataset", {}).get("root")
    if not root:
        raise UsageError("no dataset root; pass --root or set dataset.root")
    if not os.path.isdir(root):
        raise DataError(f"dataset root {root} is not a directory")
    manifest = build_manifest(root, args.split_tag)
    if manifest.skipped:
        log.warning("skipped %d orphan files", len(manifest.skipped))
    if args.split_val is not None:
        if not args.out_val:
            raise UsageError("--split-val needs --out-val for the held-out part")
        log.info("seed %d", args.seed)
        train_part, val_part = stratified_split(
            manifest, 1.0 - args.split_val, args.seed)
        save_manifest(train_part, args.out)
        save_manifest(val_part, args.out_val)
        log.info("wrote %d train and %d val entries",
                 len(train_part), len(val_part))
    else:
        save_manifest(manifest, args.out)
        log.info("wrote %d entries to %s", len(manifest), args.out)
    return 0


def _cmd_synth(args, config) -> int:
    classes = [parse_label(c, args.level) for c in args.classes.split(",")]
    if args.n % len(classes):
        raise UsageError(
            f"--n {args.n} is not a multiple of the {len(classes)} classes")
    log.info("seed %d", args.seed)
    manifest = synthesize_corpus(
        args.out, level=args.level, n_per_class=args.n // len(classes),
        seed=args.seed, duration=args.duration, sample_rate=args.rate,
        classes=classes, split_tag="synth")
    save_manifest(manifest, os.path.join(args.out, "manifest.jsonl"))
    log.info("wrote %d recordings to %s", len(manifest), args.out)
    return 0


def _cmd_preprocess(args, config) -> int:
    cleaned = preprocess(load_wav(args.wav), _policy(config),
                         args.low, args.high, args.order)
    write_wav(args.out, cleaned)
    log.info("wrote %s at %d Hz", args.out, cleaned.sample_rate)
    return 0


def _cmd_featurize(args, config) -> int:
    manifest = load_manifest(args.manifest)
    cache = args.out or os.environ.get(_CACHE_ENV)
    if not cache:
        raise UsageError(f"no cache location; pass --out or set {_CACHE_ENV}")
    index = featurize(manifest, cache, level=args.level,
                      policy=_policy(config), morse=_morse(config),
                      image_size=(args.size, args.size), workers=args.workers)
    log.info("cache holds %d %s-level scalograms under %s",
             len(index.entries), args.level, cache)
    return 0


def _cmd_train(args, config) -> int:
    train_cfg = _train_config(config, args)
    task = TaskId.parse(train_cfg.task)
    model_cfg = _model_config(config, args, task.n_classes)
    log.info("seed %d", train_cfg.seed)
    model, history = train_task(
        load_manifest(args.train_manifest), load_manifest(args.val_manifest),
        train_cfg, model_config=model_cfg, cache_dir=_cache_dir(args),
        policy=_policy(config), morse=_morse(config),
        resume_from=args.resume)
    rows = [dataclasses.asdict(e) for e in history.epochs]
    for row in rows:
        del row["wall_time_s"]  # keep the artifact byte-stable under a fixed seed
    doc = json.dumps({"config": train_cfg.to_dict(), "epochs": rows},
                     indent=2) + "\n"
    _write_or_print(doc, args.out)
    if train_cfg.checkpoint_dir:
        log.info("checkpoints under %s", train_cfg.checkpoint_dir)
    return 0


def _load_model(path):
    ckpt = checkpoint_load(path)
    ckpt.model.mode = "infer"
    return ckpt


def _cmd_evaluate(args, config) -> int:
    ckpt = _load_model(args.checkpoint)
    task = args.task or config.get("eval", {}).get("task") \
        or ckpt.train_config.task
    rep = evaluate(ckpt.model, load_manifest(args.manifest), task,
                   cache_dir=_cache_dir(args), policy=_policy(config),
                   morse=_morse(config), collapse_from=args.collapse_from,
                   macro=args.macro, exclude_pq=args.exclude_pq)
    _write_or_print(report([rep], args.format), args.out)
    return 0


def _cmd_sweep(args, config) -> int:
    gammas = [float(g) for g in args.gammas.split(",")]
    base = _train_config(config, args)
    task = TaskId.parse(base.task)
    model_cfg = _model_config(config, args, task.n_classes)
    log.info("seed %d", base.seed)
    rows = gamma_sweep(task, gammas, load_manifest(args.train_manifest),
                       load_manifest(args.val_manifest), base,
                       model_config=model_cfg, cache_dir=_cache_dir(args))
    _write_or_print(report(rows, args.format), args.out)
    return 0


def _cmd_predict(args, config) -> int:
    ckpt = _load_model(args.checkpoint)
    task = TaskId.parse(args.task or ckpt.train_config.task)
    index = featurize(load_manifest(args.manifest), _cache_dir(args),
                      level=task.level, policy=_policy(config),
                      morse=_morse(config),
                      image_size=(ckpt.model.config.input_size,) * 2)
    classes = predict(ckpt.model, index)
    names = task_class_names(task)
    rows = [{"id": e.segment_id, "class": int(c), "label": names[int(c)]}
            for e, c in zip(index.entries, classes)]
    _write_or_print(json.dumps({"predictions": rows}, indent=2) + "\n", args.out)
    return 0


def _cmd_plot(args, config) -> int:
    from PIL import Image

    if (args.wav is None) == (args.scg is None):
        raise UsageError("pass exactly one of --wav or --scg")
    if args.scg:
        pixels = load_scalogram(args.scg).pixels
    else:
        # the raw recording's scalogram; featurize + --scg shows the
        # preprocessed view the model consumes
        recording = load_wav(args.wav)
        morse = _morse(config)
        grid = select_scales(morse, recording.samples.size)
        matrix = cwt(recording.samples, morse, grid,
                     sample_rate=recording.sample_rate)
        pixels = render_image(power_scalogram(matrix), 224, 224).pixels
    data = np.round(pixels * 255.0).astype(np.uint8)
    Image.fromarray(data, "RGB").save(args.out, format="PNG")
    log.info("wrote %s", args.out)
    return 0


def _cmd_export_embeddings(args, config) -> int:
    ckpt = _load_model(args.checkpoint)
    task = TaskId.parse(args.task or ckpt.train_config.task)
    index = featurize(load_manifest(args.manifest), _cache_dir(args),
                      level=task.level, policy=_policy(config),
                      morse=_morse(config),
                      image_size=(ckpt.model.config.input_size,) * 2)
    samples = [(e.segment_id, e.label, load_batch(index, [i])[0])
               for i, e in enumerate(index.entries)]
    export_embeddings(ckpt.model, samples, path=args.out)
    log.info("wrote %d embeddings to %s", len(samples), args.out)
    return 0


# ---------------------------------------------------------------------------
# parser

class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags; route through the usage-error path
    def error(self, message):
        raise UsageError(message)


def _add_common(sub, cache=False, seed=False):
    sub.add_argument("--config", help="JSON run config file")
    if cache:
        sub.add_argument("--cache-dir",
                         help=f"scalogram cache root (default ${_CACHE_ENV})")
    if seed:
        sub.add_argument("--seed", type=int, default=0,
                         help="random seed (default 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lungsound",
                     description="Pediatric lung-sound classification pipeline")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("ingest", help="pair WAVs with annotations into a manifest",
                        epilog="config keys read: dataset.root")
    p.add_argument("--root", help="dataset directory")
    p.add_argument("--split-tag", default="train")
    p.add_argument("--out", required=True, help="manifest path (JSON lines)")
    p.add_argument("--split-val", type=float,
                   help="hold out this fraction as a validation manifest")
    p.add_argument("--out-val", help="validation manifest path (with --split-val)")
    _add_common(p, seed=True)
    p.set_defaults(func=_cmd_ingest)

    p = subs.add_parser("synth", help="generate a labeled synthetic corpus",
                        epilog="config keys read: none")
    p.add_argument("--classes", required=True,
                   help="comma-separated class names, e.g. wheeze,normal")
    p.add_argument("--level", choices=("event", "record"), default="event")
    p.add_argument("--n", type=int, required=True,
                   help="total recordings (multiple of the class count)")
    p.add_argument("--duration", type=float, default=9.216)
    p.add_argument("--rate", type=int, default=8000)
    p.add_argument("--out", required=True, help="output directory")
    _add_common(p, seed=True)
    p.set_defaults(func=_cmd_synth)

    p = subs.add_parser("preprocess", help="bandpass, resample, and normalize one WAV",
                        epilog="config keys read: dsp.record_window, dsp.head_trim, "
                               "dsp.event_length, dsp.target_rate")
    p.add_argument("--wav", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--low", type=float, default=50.0, help="band low edge Hz")
    p.add_argument("--high", type=float, default=2000.0, help="band high edge Hz")
    p.add_argument("--order", type=int, default=4)
    _add_common(p)
    p.set_defaults(func=_cmd_preprocess)

    p = subs.add_parser("featurize", help="fill the scalogram cache for a manifest",
                        epilog="config keys read: dsp.*, scalogram.gamma_sym, "
                               "scalogram.time_bandwidth, scalogram.voices_per_octave")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help=f"cache directory (default ${_CACHE_ENV})")
    p.add_argument("--level", choices=("event", "record"), default="event")
    p.add_argument("--size", type=int, default=224, help="image side length")
    p.add_argument("--workers", type=int, default=1)
    _add_common(p)
    p.set_defaults(func=_cmd_featurize)

    p = subs.add_parser("train", help="train one task's classifier",
                        epilog="config keys read: dsp.*, scalogram.*, model.*, "
                               "train.*, eval.task")
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--val-manifest", required=True)
    p.add_argument("--task", help="1-1, 1-2, 2-1, or 2-2")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--gamma", type=float, help="focal focusing override")
    p.add_argument("--checkpoint-dir")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--toy", action="store_true",
                   help="desk-scale model instead of the full architecture")
    p.add_argument("--out", help="history JSON path (default stdout)")
    _add_common(p, cache=True, seed=True)
    # default None, not 0: an absent flag defers to train.seed in the config
    p.set_defaults(func=_cmd_train, seed=None)

    p = subs.add_parser("evaluate", help="score a checkpoint on a manifest",
                        epilog="config keys read: dsp.*, scalogram.*, eval.task")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--task", help="default: the checkpoint's training task")
    p.add_argument("--collapse-from",
                   help="score a 1-2 or 2-2 model on a coarser task")
    p.add_argument("--macro", action="store_true",
                   help="macro-average SE over non-Normal classes")
    p.add_argument("--exclude-pq", action="store_true",
                   help="drop Poor Quality from SE on record tasks")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--out", help="report path (default stdout)")
    _add_common(p, cache=True)
    p.set_defaults(func=_cmd_evaluate)

    p = subs.add_parser("sweep", help="train and score once per focusing value",
                        epilog="config keys read: dsp.*, scalogram.*, model.*, "
                               "train.*, eval.task")
    p.add_argument("--gammas", required=True, help="comma list, e.g. 2,3,4,5")
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--val-manifest", required=True)
    p.add_argument("--task")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--toy", action="store_true")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--out", help="report path (default stdout)")
    _add_common(p, cache=True, seed=True)
    p.set_defaults(func=_cmd_sweep, seed=None)

    p = subs.add_parser("predict", help="per-segment class predictions",
                        epilog="config keys read: dsp.*, scalogram.*")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--task", help="default: the checkpoint's training task")
    p.add_argument("--out", help="predictions JSON path (default stdout)")
    _add_common(p, cache=True)
    p.set_defaults(func=_cmd_predict)

    p = subs.add_parser("plot", help="render a scalogram as a 224x224 PNG",
                        epilog="config keys read: scalogram.* (for --wav)")
    p.add_argument("--wav", help="recording to transform and render")
    p.add_argument("--scg", help="cached scalogram file to render")
    p.add_argument("--out", required=True, help="PNG path")
    _add_common(p)
    p.set_defaults(func=_cmd_plot)

    p = subs.add_parser("export-embeddings",
                        help="CSV of pooled transformer embeddings per segment",
                        epilog="config keys read: dsp.*, scalogram.*")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--task", help="default: the checkpoint's training task")
    p.add_argument("--out", required=True, help="CSV path")
    _add_common(p, cache=True)
    p.set_defaults(func=_cmd_export_embeddings)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        config = load_run_config(getattr(args, "config", None))
        return args.func(args, config)
    except UsageError as exc:
        log.error("%s", exc)
        return 1
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return 3
    except LungsoundError as exc:  # DataError and anything else domain-level
        log.error("%s", exc)
        return 2
    except OSError as exc:  # unreadable/missing input files
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
