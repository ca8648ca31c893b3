"""Command-line entry point: ``imupen <command> [options]``.

Settings come from built-in defaults, then the ``--config`` JSON file, then
command-line flags, later sources winning.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import evaluation, network, sensor_data, synthgen, training
from .ctc import LATIN

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_BAD_CONFIG = 3
EXIT_MISSING_FILE = 4
EXIT_BAD_DATA = 5

log = logging.getLogger("imupen")


class ConfigError(ValueError):
    pass


SYNTH_DEFAULTS = {
    "vocab": list(synthgen.MAIN_VOCAB),
    "unseen_vocab": list(synthgen.UNSEEN_VOCAB),
    "n_writers": 8,
    "samples_per_writer": 150,
    "unseen_writers": 2,
    "unseen_samples_per_writer": 100,
    "noise": synthgen.DEFAULT_NOISE,
    "template_seed": 0,
    "seed": 0,
}
PREP_DEFAULTS = {
    "threshold": sensor_data.DEFAULT_FORCE_THRESHOLD,
    "min_frames": sensor_data.DEFAULT_MIN_FRAMES,
    "max_frames": sensor_data.DEFAULT_MAX_FRAMES,
}
SPLIT_DEFAULTS = {"k": 5, "seed": 0, "val_fraction": 0.2}


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{p}: top level must be an object")
    return cfg


def merged(defaults: dict, config: dict, section: str, flags: dict) -> dict:
    """defaults < config[section] (and a top-level "seed") < non-None flags."""
    out = dict(defaults)
    sec = config.get(section, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    if "seed" in config and "seed" in defaults:
        out["seed"] = config["seed"]
    unknown = set(sec) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown keys in config section {section!r}: {sorted(unknown)}")
    out.update(sec)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- commands

def cmd_synth(args, config) -> int:
    s = merged(SYNTH_DEFAULTS, config, "synth", {
        "seed": args.seed, "n_writers": args.writers, "samples_per_writer": args.samples_per_writer})
    out = _out_dir(args, "data")
    main = synthgen.synth_dataset(s["vocab"], s["n_writers"], s["samples_per_writer"], seed=s["seed"],
                                  noise=s["noise"], template_seed=s["template_seed"])
    sensor_data.write_dataset(main, out / "main.jsonl")
    written = [out / "main.jsonl"]
    if s["unseen_vocab"] and s["unseen_writers"]:
        unseen = synthgen.synth_unseen_dataset(s["unseen_vocab"], s["vocab"], s["unseen_writers"],
                                               s["unseen_samples_per_writer"], seed=s["seed"] + 1,
                                               noise=s["noise"], template_seed=s["template_seed"])
        sensor_data.write_dataset(unseen, out / "unseen.jsonl")
        written.append(out / "unseen.jsonl")
    (out / "synth_config.json").write_text(json.dumps(s, indent=1, sort_keys=True) + "\n")
    for p in written:
        print(p)
    return EXIT_OK


def cmd_prep(args, config) -> int:
    s = merged(PREP_DEFAULTS, config, "prep", {
        "threshold": args.threshold, "min_frames": args.min_frames, "max_frames": args.max_frames})
    ds = sensor_data.parse_dataset(args.input)
    clean, stats = sensor_data.prepare_dataset(ds, s["threshold"], s["min_frames"], s["max_frames"])
    out = Path(args.out or Path(args.input).with_suffix(".prep.jsonl"))
    out.parent.mkdir(parents=True, exist_ok=True)
    sensor_data.write_dataset(clean, out, normalized=True)
    print(json.dumps(stats, sort_keys=True))
    return EXIT_OK


def cmd_split(args, config) -> int:
    s = merged(SPLIT_DEFAULTS, config, "split", {"seed": args.seed, "k": args.k})
    ds = sensor_data.parse_dataset(args.input)
    folds = sensor_data.split_writer_folds(ds, s["k"], s["seed"], s["val_fraction"])
    for p in sensor_data.write_manifests(folds, _out_dir(args, "splits"), seed=s["seed"]):
        print(p)
    return EXIT_OK


def _fold_split(args, fold: int) -> sensor_data.FoldSplit:
    if args.manifest:
        return sensor_data.read_manifest(args.manifest)
    if args.splits:
        return sensor_data.read_manifest(Path(args.splits) / f"fold{fold}.json")
    raise ConfigError("train needs --manifest or --splits")


def cmd_train(args, config) -> int:
    sec = dict(config.get("train", {}))
    if "seed" in config:
        sec.setdefault("seed", config["seed"])
    for key, val in (("model", args.model), ("seed", args.seed), ("fold", args.fold), ("max_epochs", args.max_epochs)):
        if val is not None:
            sec[key] = val
    try:
        cfg = training.TrainRunConfig.from_dict(sec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    ds = sensor_data.parse_dataset(args.data)
    split = _fold_split(args, cfg.fold)
    train_s = [ds[i] for i in split.train_samples]
    val_s = [ds[i] for i in split.val_samples]
    out = _out_dir(args, "run")

    def progress(row):
        log.info("epoch %d lr %.3g train %.4f val %.4f cer %.4f", row["epoch"], row["lr"],
                 row["train_loss"], row["val_loss"], row["val_cer"])

    result = training.train(cfg, train_s, val_s, LATIN, progress=progress)
    meta = {"best_epoch": result.best_epoch, "best_val_loss": result.best_val_loss,
            "stopped": result.stopped, "train_config": cfg.to_dict()}
    network.save_checkpoint(out / "checkpoint.json", result.spec, result.params, LATIN, meta)
    result.write_log(out / "train_log.csv")
    (out / "run_config.json").write_text(json.dumps({"train": cfg.to_dict()}, indent=1, sort_keys=True) + "\n")
    print(out / "checkpoint.json")
    return EXIT_OK


def cmd_eval(args, config) -> int:
    spec, params, alphabet, _ = network.load_checkpoint(args.checkpoint)
    ds = sensor_data.parse_dataset(args.data, alphabet)
    samples = list(ds)
    if args.manifest:
        samples = [ds[i] for i in sensor_data.read_manifest(args.manifest).test_samples]
    res = training.evaluate(spec, params, samples, alphabet)
    pairs = list(zip(res.predictions, res.references))
    report = evaluation.evaluate_pairs(pairs)
    evaluation.write_report(report, _out_dir(args, "report"), pairs)
    print(f"n={report.n_samples} cer={report.cer:.4f} wer={report.wer:.4f} crr={report.crr:.4f}")
    return EXIT_OK


def cmd_decode(args, config) -> int:
    spec, params, alphabet, _ = network.load_checkpoint(args.checkpoint)
    ds = sensor_data.parse_dataset(args.data, alphabet)
    if not 0 <= args.index < len(ds):
        raise IndexError(f"sample index {args.index} out of range (0..{len(ds) - 1})")
    sample = ds[args.index]
    if args.raw:
        s = merged(PREP_DEFAULTS, config, "prep", {})
        sample = sensor_data.zscore_normalize(sensor_data.trim_hover(sample, s["threshold"]))
    print(training.decode(spec, params, sample.frames, alphabet))
    return EXIT_OK


def cmd_params(args, config) -> int:
    name = args.model or config.get("train", {}).get("model", "cldnn")
    print(f"{network.param_count(network.build_model(name)):,}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--model", choices=["cnn", "cldnn"])
    common.add_argument("--fold", type=int, choices=range(1, 6), metavar="{1..5}")
    common.add_argument("--out", help="output directory (or file for prep)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="imupen", description="IMU-pen word recognizer toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic datasets")
    p.add_argument("--writers", type=int)
    p.add_argument("--samples-per-writer", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prep", parents=[common], help="trim, filter and normalize a dataset")
    p.add_argument("input")
    p.add_argument("--threshold", type=float)
    p.add_argument("--min-frames", type=int)
    p.add_argument("--max-frames", type=int)
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("split", parents=[common], help="write writer-disjoint fold manifests")
    p.add_argument("input")
    p.add_argument("--k", type=int)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", parents=[common], help="train a model on one fold")
    p.add_argument("data", help="prepared dataset (JSONL)")
    p.add_argument("--manifest", help="fold manifest JSON")
    p.add_argument("--splits", help="directory of fold manifests (used with --fold)")
    p.add_argument("--max-epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="decode a test set and write metric reports")
    p.add_argument("checkpoint")
    p.add_argument("data")
    p.add_argument("--manifest", help="evaluate only this manifest's test samples")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("decode", parents=[common], help="decode one sample to a word")
    p.add_argument("checkpoint")
    p.add_argument("data")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--raw", action="store_true", help="trim and normalize the sample first")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("params", parents=[common], help="print the trainable-parameter count")
    p.set_defaults(func=cmd_params)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config)
        return args.func(args, config)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except ConfigError as exc:
        print(f"error: bad config: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    except (sensor_data.DatasetFormatError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_DATA
    except Exception as exc:  # noqa: BLE001
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


dispatch = main

if __name__ == "__main__":
    sys.exit(main())
