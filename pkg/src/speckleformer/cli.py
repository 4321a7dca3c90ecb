"""Command-line entry points: generate, preprocess, train, evaluate, explain.

A single JSON run config drives every command; flags override the file,
which overrides built-in defaults. Unknown keys are rejected. Exit
codes: 0 success, 1 runtime failure, 2 bad input or configuration.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict

import numpy as np

from .data import (DatasetManifest, PreprocessConfig, SpecklegramSample,
                   SyntheticConfig, generate_synthetic, load_dataset,
                   preprocess, save_manifest, split)
from .errors import ConfigError, InputError, SpeckleformerError
from .models import Model, ModelConfig
from .pgmio import read_pgm, write_pgm
from .train import (TrainConfig, evaluate, load_checkpoint, save_checkpoint,
                    train, write_history_csv)
from .xai import explain_to_directory

_DATA_KEYS = {"manifest", "synthetic", "split_seed", "ratios"}
_TOP_KEYS = {"data", "preprocess", "model", "train", "output_dir"}


def default_run_config() -> dict:
    return {
        "data": {
            "manifest": None,
            "synthetic": asdict(SyntheticConfig()),
            "split_seed": 0,
            "ratios": [70, 20, 10],
        },
        "preprocess": asdict(PreprocessConfig()),
        "model": ModelConfig(variant="vit").to_dict(),
        "train": asdict(TrainConfig()),
        "output_dir": "runs/latest",
    }


def _check_keys(section: dict, allowed: set, where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def load_run_config(path: str | None, seed: int | None) -> dict:
    config = default_run_config()
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                user = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"{path}: config file not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        _check_keys(user, _TOP_KEYS, "run config")
        for section in ("data", "preprocess", "model", "train"):
            if section in user:
                sub = user[section]
                if not isinstance(sub, dict):
                    raise ConfigError(f"section {section!r} must be an object")
                allowed = {
                    "data": _DATA_KEYS,
                    "preprocess": set(PreprocessConfig.__dataclass_fields__),
                    "model": set(ModelConfig.__dataclass_fields__),
                    "train": set(TrainConfig.__dataclass_fields__),
                }[section]
                _check_keys(sub, allowed, f"section {section!r}")
                if section == "data" and "synthetic" in sub:
                    _check_keys(sub["synthetic"],
                                set(SyntheticConfig.__dataclass_fields__),
                                "section 'data.synthetic'")
                    config["data"]["synthetic"].update(sub.pop("synthetic"))
                config[section].update(sub)
        if "output_dir" in user:
            config["output_dir"] = user["output_dir"]
    if seed is not None:
        config["model"]["seed"] = seed
        config["train"]["seed"] = seed
        config["data"]["split_seed"] = seed
    return config


def _preprocess_config(config: dict, model_cfg: ModelConfig) -> PreprocessConfig:
    raw = dict(config["preprocess"])
    if raw.get("target_size") is None:
        raw["target_size"] = (model_cfg.image_size, model_cfg.image_size)
    else:
        raw["target_size"] = tuple(raw["target_size"])
    return PreprocessConfig(**raw)


def _dataset(config: dict, seed: int) -> list[SpecklegramSample]:
    data = config["data"]
    if data.get("manifest"):
        return load_dataset(data["manifest"])
    return generate_synthetic(SyntheticConfig(**data["synthetic"]), seed=seed)


def _processed_split(config: dict, model_cfg: ModelConfig
                     ) -> tuple[list, list, list]:
    samples = _dataset(config, seed=config["data"]["split_seed"])
    pp = _preprocess_config(config, model_cfg)
    processed = [SpecklegramSample(preprocess(s, pp), s.temperature, s.source_id)
                 for s in samples]
    ratios = tuple(config["data"]["ratios"])
    return split(processed, ratios=ratios, seed=config["data"]["split_seed"])


def _write_metrics(report, path: str, timestamp: bool) -> None:
    payload = report.to_dict()
    if timestamp:
        payload["timestamp"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def cmd_generate(args) -> int:
    config = load_run_config(args.config, args.seed)
    syn = SyntheticConfig(**config["data"]["synthetic"])
    seed = args.seed if args.seed is not None else 0
    samples = generate_synthetic(syn, seed=seed)
    out_dir = args.out or os.path.join(config["output_dir"], "dataset")
    os.makedirs(out_dir, exist_ok=True)
    records = []
    for i, sample in enumerate(samples):
        name = f"img_{i:04d}.pgm"
        write_pgm(os.path.join(out_dir, name), sample.image[:, :, 0])
        records.append((name, sample.temperature))
    save_manifest(DatasetManifest(records), os.path.join(out_dir, "manifest.csv"))
    print(f"wrote {len(samples)} samples to {out_dir}")
    return 0


def cmd_preprocess(args) -> int:
    config = load_run_config(args.config, args.seed)
    data = config["data"]
    if not data.get("manifest"):
        raise ConfigError("preprocess needs data.manifest in the config")
    samples = load_dataset(data["manifest"])
    raw = dict(config["preprocess"])
    if raw.get("target_size") is not None:
        raw["target_size"] = tuple(raw["target_size"])
    raw["replicate_channels"] = False      # PGM output is single-channel
    pp = PreprocessConfig(**raw)
    out_dir = args.out or os.path.join(config["output_dir"], "preprocessed")
    os.makedirs(out_dir, exist_ok=True)
    records = []
    for i, sample in enumerate(samples):
        name = f"img_{i:04d}.pgm"
        processed = preprocess(sample, pp)
        write_pgm(os.path.join(out_dir, name), processed[:, :, 0])
        records.append((name, sample.temperature))
    save_manifest(DatasetManifest(records), os.path.join(out_dir, "manifest.csv"))
    print(f"wrote {len(samples)} preprocessed samples to {out_dir}")
    return 0


def cmd_train(args) -> int:
    config = load_run_config(args.config, args.seed)
    model_cfg = ModelConfig.from_dict(config["model"])
    model_cfg.validate()
    train_cfg = TrainConfig(**config["train"])
    train_split, val_split, _ = _processed_split(config, model_cfg)
    start_epoch = 0
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        model = ckpt.build_model()
        start_epoch = ckpt.epoch + 1
        print(f"resuming from epoch {ckpt.epoch}")
    else:
        model = Model(model_cfg)
    ckpt, history = train(model, train_split, val_split, train_cfg,
                          start_epoch=start_epoch)
    out_dir = config["output_dir"]
    os.makedirs(out_dir, exist_ok=True)
    save_checkpoint(ckpt, os.path.join(out_dir, "checkpoint.spkf"))
    write_history_csv(history, os.path.join(out_dir, "history.csv"))
    if val_split:
        _write_metrics(evaluate(model, val_split),
                       os.path.join(out_dir, "metrics_val.json"), args.timestamp)
    print(f"trained {model_cfg.variant} for {len(history)} epochs; "
          f"best epoch {ckpt.epoch}; outputs in {out_dir}")
    return 0


def cmd_evaluate(args) -> int:
    config = load_run_config(args.config, args.seed)
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    parts = dict(zip(("train", "val", "test"),
                     _processed_split(config, model.config)))
    report = evaluate(model, parts[args.split])
    out_dir = config["output_dir"]
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"metrics_{args.split}.json")
    _write_metrics(report, path, args.timestamp)
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


def cmd_explain(args) -> int:
    config = load_run_config(args.config, args.seed)
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    raw = read_pgm(args.image).astype(np.float64) / 255.0
    sample = SpecklegramSample(raw[:, :, None], temperature=0.0,
                               source_id=args.image)
    pp = _preprocess_config(config, model.config)
    image = preprocess(sample, pp)
    out_dir = args.out or os.path.join(config["output_dir"], "explain")
    written = explain_to_directory(model, image, out_dir)
    if model.config.variant == "cnn":
        print("attention maps unavailable for cnn; wrote saliency only")
    print(f"wrote {len(written)} files to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="speckleformer",
        description="Train and explain specklegram temperature-regression models.")
    parser.add_argument("--print-defaults", action="store_true",
                        help="print the full default run config as JSON and exit")
    sub = parser.add_subparsers(dest="command")

    def common(p):
        p.add_argument("--config", help="path to a JSON run config")
        p.add_argument("--seed", type=int, default=None,
                       help="override every seed in the run config")

    p_gen = sub.add_parser("generate", help="write a synthetic PGM dataset")
    common(p_gen)
    p_gen.add_argument("--out", help="dataset directory (default: <output_dir>/dataset)")
    p_gen.set_defaults(func=cmd_generate)

    p_pre = sub.add_parser("preprocess", help="materialize preprocessed images")
    common(p_pre)
    p_pre.add_argument("--out", help="output directory (default: <output_dir>/preprocessed)")
    p_pre.set_defaults(func=cmd_preprocess)

    p_train = sub.add_parser("train", help="train a model per the run config")
    common(p_train)
    p_train.add_argument("--resume", help="checkpoint to continue from")
    p_train.add_argument("--timestamp", action="store_true",
                         help="include a timestamp in metrics JSON")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("evaluate", help="evaluate a checkpoint on one split")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--split", choices=("train", "val", "test"), default="test")
    p_eval.add_argument("--timestamp", action="store_true",
                        help="include a timestamp in metrics JSON")
    p_eval.set_defaults(func=cmd_evaluate)

    p_exp = sub.add_parser("explain", help="render attention/saliency maps")
    common(p_exp)
    p_exp.add_argument("--checkpoint", required=True)
    p_exp.add_argument("--image", required=True, help="input PGM image")
    p_exp.add_argument("--out", help="output directory (default: <output_dir>/explain)")
    p_exp.set_defaults(func=cmd_explain)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_defaults:
        print(json.dumps(default_run_config(), sort_keys=True, indent=2))
        return 0
    if args.command is None:
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SpeckleformerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
