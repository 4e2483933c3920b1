"""Command-line surface: dataset generation, training, verification,
evaluation, checkpoint inspection.

Every command resolves its options as: explicit flag > --config JSON file
value > built-in default, and each produced artifact gets a manifest JSON
recording the command, the fully resolved configuration, the master seed,
a build id and timestamps. Exit codes: 0 success, 1 check/eval/data
failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time
from typing import Dict, List, Optional

import numpy as np

from .datagen import (CORRUPTIONS, DatasetSpec, corpus_stats, gen_dataset,
                      read_dataset, read_header, write_dataset)
from .errors import (ChecksumError, ConfigError, ContractError,
                     DataFormatError, TrainingDiverged)
from .models import ModelConfig, build_model, desk_encoder_config
from .training import (TrainConfig, config_hash, evaluate, load_checkpoint,
                       train, write_metrics_csv)
from .verify import SCOPES, run_suite

MODEL_FLAGS = ("io-v8", "io-w12", "output-base", "siamese",
               "concat-baseline")  # plus output-nlayers=N


def build_id() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"],
                             capture_output=True, text=True, timeout=5,
                             cwd=os.path.dirname(__file__))
        if rev.returncode == 0:
            return f"ioreward-0.1.0+g{rev.stdout.strip()}"
    except Exception:
        pass
    return "ioreward-0.1.0"


def write_manifest(path: str, command: str, resolved: dict, seed: int,
                   outputs: List[str], started: float):
    manifest = {
        "command": command,
        "config": resolved,
        "master_seed": seed,
        "build_id": build_id(),
        "started_unix": started,
        "finished_unix": time.time(),
        "outputs": outputs,
    }
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _resolve(args: argparse.Namespace, defaults: Dict[str, object]) -> dict:
    """flag > config-file value > default."""
    file_vals: Dict[str, object] = {}
    if getattr(args, "config", None):
        with open(args.config) as f:
            file_vals = json.load(f)
        unknown = set(file_vals) - set(defaults)
        if unknown:
            raise ConfigError(
                f"config file keys not recognized: {sorted(unknown)}")
    resolved = {}
    for key, default in defaults.items():
        cli_val = getattr(args, key.replace("-", "_"), None)
        if cli_val is not None:
            resolved[key] = cli_val
        elif key in file_vals:
            resolved[key] = file_vals[key]
        else:
            resolved[key] = default
    return resolved


def _parse_model_flag(value: str):
    if value.startswith("output-nlayers="):
        n = int(value.split("=", 1)[1])
        return "output-nlayers", n
    mapping = {"io-v8": "io-v8", "io-w12": "io-w12",
               "output-base": "output-base", "siamese": "siamese-io",
               "concat-baseline": "concat-baseline"}
    if value not in mapping:
        raise ConfigError(
            f"unknown model {value!r}; choose from "
            f"{MODEL_FLAGS + ('output-nlayers=N',)}")
    return mapping[value], 0


def _onoff(value: str) -> bool:
    if value not in ("on", "off"):
        raise ConfigError(f"expected on/off, got {value!r}")
    return value == "on"


# ---------------------------------------------------------------------------
# commands


GEN_DEFAULTS = {"kind": "cd25", "categories": 5, "samples": 1000,
                "size": 32, "seed": 0, "pairing": "identity",
                "corruptions": ",".join(CORRUPTIONS)}


def cmd_gen_data(args) -> int:
    started = time.time()
    cfg = _resolve(args, GEN_DEFAULTS)
    if not args.out:
        raise ConfigError("--out is required")
    spec = DatasetSpec(
        kind=cfg["kind"], num_categories=int(cfg["categories"]),
        num_samples=int(cfg["samples"]), image_size=int(cfg["size"]),
        seed=int(cfg["seed"]), pairing=cfg["pairing"],
        corruption_menu=tuple(
            c for c in str(cfg["corruptions"]).split(",") if c))
    samples = gen_dataset(spec)
    write_dataset(spec, args.out, samples)
    stats = corpus_stats(samples)
    if spec.num_samples == 0:
        print("warning: wrote an empty dataset (0 samples)")
    print(f"wrote {stats['count']} samples to {args.out}")
    print(f"label balance: {stats['label_balance']:.4f}")
    print(f"category_in histogram: {stats['category_in_histogram']}")
    print(f"category_out histogram: {stats['category_out_histogram']}")
    write_manifest(args.out + ".manifest.json", "gen-data",
                   {**cfg, "out": args.out}, spec.seed, [args.out], started)
    return 0


TRAIN_DEFAULTS = {
    "model": "io-v8", "epochs": 30, "cyclic-shift-cross": "off",
    "seed": 0, "batch-size": 32, "base-lr": 2e-5, "min-lr": 2e-7,
    "warmup-lr": 2e-8, "warmup-epochs": None, "weight-decay": 0.05,
    "mixup-alpha": 0.8, "val-fraction": 0.2, "embed-dim": 16,
}


def cmd_train(args) -> int:
    started = time.time()
    cfg = _resolve(args, TRAIN_DEFAULTS)
    if not args.data or not args.out:
        raise ConfigError("--data and --out are required")
    header = read_header(args.data)
    if header.kind not in ("cd25", "seg"):
        raise ConfigError(f"model needs paired data, got {header.kind}")
    variant, n_extra = _parse_model_flag(str(cfg["model"]))
    enc = desk_encoder_config(
        in_channels=6 if variant == "concat-baseline" else 3,
        image_size=header.image_size)
    if int(cfg["embed-dim"]) != enc.embed_dim:
        from .encoder import EncoderConfig
        enc = EncoderConfig(in_channels=enc.in_channels,
                            image_size=enc.image_size,
                            embed_dim=int(cfg["embed-dim"]))
    model_cfg = ModelConfig(
        variant=variant, encoder=enc,
        cyclic_shift_in_cross=_onoff(str(cfg["cyclic-shift-cross"])),
        output_extra_layers=n_extra, seed=int(cfg["seed"]))
    model = build_model(model_cfg)
    samples = list(read_dataset(args.data))
    vf = float(cfg["val-fraction"])
    if not 0.0 < vf < 1.0:
        raise ConfigError("val-fraction must be in (0, 1) for training")
    n_train = int(round(len(samples) * (1.0 - vf)))
    train_set, val_set = samples[:n_train], samples[n_train:]
    warmup = cfg["warmup-epochs"]
    tcfg = TrainConfig(
        base_lr=float(cfg["base-lr"]), min_lr=float(cfg["min-lr"]),
        warmup_lr=float(cfg["warmup-lr"]),
        warmup_epochs=None if warmup is None else int(warmup),
        total_epochs=int(cfg["epochs"]), batch_size=int(cfg["batch-size"]),
        weight_decay=float(cfg["weight-decay"]),
        mixup_alpha=float(cfg["mixup-alpha"]), seed=int(cfg["seed"]))
    os.makedirs(args.out, exist_ok=True)
    report = train(model, train_set, val_set, tcfg, out_dir=args.out,
                   resume=args.resume,
                   model_config_dict=model_cfg.to_dict())
    print(f"best val accuracy {100 * report.best_val_acc:.2f}% at epoch "
          f"{report.best_epoch}/{report.total_epochs}")
    resolved = {**cfg, "data": args.data, "out": args.out,
                "resume": args.resume,
                "model_config": model_cfg.to_dict(),
                "train_config": tcfg.to_dict()}
    write_manifest(os.path.join(args.out, "manifest.json"), "train",
                   resolved, tcfg.seed,
                   [os.path.join(args.out, "last.iock"),
                    os.path.join(args.out, "metrics.csv")], started)
    return 0


def cmd_verify(args) -> int:
    scopes = args.scope.split(",") if args.scope else list(SCOPES)
    report = run_suite(scopes)
    print(report.to_text())
    if args.csv:
        started = time.time()
        with open(args.csv, "w") as f:
            f.write(report.to_csv())
        write_manifest(args.csv + ".manifest.json", "verify",
                       {"scope": scopes, "csv": args.csv}, 0, [args.csv],
                       started)
    return 0 if report.all_passed else 1


def _load_model_for_checkpoint(ckpt_path: str):
    manifest_path = os.path.join(os.path.dirname(ckpt_path) or ".",
                                 "manifest.json")
    if not os.path.exists(manifest_path):
        raise DataFormatError(
            f"no manifest.json beside {ckpt_path}; cannot rebuild the model")
    with open(manifest_path) as f:
        manifest = json.load(f)
    model_cfg = ModelConfig.from_dict(manifest["config"]["model_config"])
    stored_hash, tensors = load_checkpoint(ckpt_path)
    if stored_hash != config_hash(model_cfg.to_dict()):
        raise ChecksumError(
            f"{ckpt_path}: config hash does not match the manifest's model")
    model = build_model(model_cfg)
    for name, p in model.named_parameters().items():
        key = f"param/{name}"
        if key not in tensors:
            raise DataFormatError(f"{ckpt_path}: missing tensor {key}")
        p.data = tensors[key].reshape(p.data.shape).astype(p.data.dtype)
    return model, model_cfg, tensors


def cmd_eval(args) -> int:
    if not args.ckpt or not args.data:
        raise ConfigError("--ckpt and --data are required")
    model, _cfg, _tensors = _load_model_for_checkpoint(args.ckpt)
    samples = list(read_dataset(args.data))
    if args.split == "val":
        n_train = int(round(len(samples) * (1.0 - args.val_fraction)))
        samples = samples[n_train:]
    result = evaluate(model, samples)
    print(f"accuracy: {100 * result.accuracy:.1f}%")
    print(f"confusion [true x pred]: {result.confusion.tolist()}")
    return 0


def cmd_inspect(args) -> int:
    if not args.ckpt:
        raise ConfigError("--ckpt is required")
    cfg_hash, tensors = load_checkpoint(args.ckpt)
    print(f"checkpoint: {args.ckpt}")
    print(f"format version: 1")
    print(f"config hash: {cfg_hash.hex()}")
    print(f"tensors: {len(tensors)}")
    for name, arr in tensors.items():
        print(f"  {name}  {list(arr.shape)}")
    return 0


# ---------------------------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ioreward",
        description="dual-encoder reward models, desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic paired corpus")
    g.add_argument("--kind", choices=["cd25", "seg"])
    g.add_argument("--categories", type=int)
    g.add_argument("--samples", type=int)
    g.add_argument("--size", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--pairing", choices=["identity", "permuted"])
    g.add_argument("--corruptions", type=str,
                   help="comma-separated menu for seg corpora")
    g.add_argument("--out", required=True)
    g.add_argument("--config", help="JSON file supplying defaults")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a reward model variant")
    t.add_argument("--model",
                   help="io-v8|io-w12|output-base|output-nlayers=N|"
                        "siamese|concat-baseline")
    t.add_argument("--data", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--cyclic-shift-cross", choices=["on", "off"])
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--base-lr", type=float)
    t.add_argument("--min-lr", type=float)
    t.add_argument("--warmup-lr", type=float)
    t.add_argument("--warmup-epochs", type=int)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--mixup-alpha", type=float)
    t.add_argument("--val-fraction", type=float)
    t.add_argument("--embed-dim", type=int)
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="JSON file supplying defaults")
    t.set_defaults(fn=cmd_train)

    v = sub.add_parser("verify", help="run the invariant suite")
    v.add_argument("--scope", help=f"comma list from {','.join(SCOPES)}")
    v.add_argument("--csv", help="also write the report as CSV")
    v.set_defaults(fn=cmd_verify)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=["all", "val"], default="all")
    e.add_argument("--val-fraction", type=float, default=0.2)
    e.set_defaults(fn=cmd_eval)

    i = sub.add_parser("inspect", help="dump a checkpoint header")
    i.add_argument("--ckpt", required=True)
    i.set_defaults(fn=cmd_inspect)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ContractError, OSError) as exc:
        # bad flags / unreadable or unwritable paths are usage errors
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (ChecksumError, DataFormatError, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
