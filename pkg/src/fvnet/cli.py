"""Command-line surface: dataset generation, training, evaluation, checks.

Every training-related command reads a YAML run configuration whose schema
is fully explicit: all keys must be present and unknown keys are rejected,
so a config file is a complete record of a run.  Each command snapshots
the resolved config into its run directory next to the metric CSVs and
bundle checkpoints.

Exit codes: 0 success, 2 config error, 3 missing file, 4 dimension or
format mismatch, 1 anything else.  Failures print one machine-parsable
``error:<category>: message`` line to stderr.
"""

import argparse
import os
import shutil
import sys

import numpy as np
import yaml

from . import data, train
from .features import ExtractorConfig
from .pipeline import (BundleFormatError, DimMismatchError,
                       classify_video, count_parameters, load_bundle,
                       save_bundle)
from .pooling import PoolConfig
from .svm import encode_label
from .tensor import TensorFileError

EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_DIMS = 4


class ConfigError(ValueError):
    pass


# section -> key -> required type(s)
CONFIG_SCHEMA = {
    "seed": int,
    "paths": {
        "data_dir": str,
        "run_dir": str,
    },
    "gen": {
        "classes": int,
        "per_class_train": int,
        "per_class_test": int,
        "frames": int,
        "height": int,
        "width": int,
        "train_seed": int,
        "test_seed": int,
    },
    "extractor": {
        "enabled": bool,
        "filters": int,
        "kernel": int,
        "pool_window": int,
        "pool_stride": int,
    },
    "pool": {
        "n_sigma": int,
        "n_tau": int,
        "cell_h": int,
        "cell_w": int,
        "window_frames": int,
        "spatial_stride": int,
    },
    "init": {
        "subvolumes_per_video": int,
        "pca_samples_per_video": int,
        "n_components": int,
        "mixture_components": int,
        "svm_c": (int, float),
        "em_iters": int,
        "em_tol": (int, float),
        "svm_epochs": int,
        "svm_lr": (int, float),
    },
    "finetune": {
        "optimizer": str,
        "learning_rate": (int, float),
        "momentum": (int, float),
        "lr_decay": (int, float),
        "dropout": (int, float),
        "epochs": int,
        "spatial_stride": int,
        "temporal_stride": int,
    },
}


def _validate_section(schema, value, prefix):
    if isinstance(schema, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{prefix or 'config'}: expected a mapping")
        for key in value:
            if key not in schema:
                raise ConfigError(f"unknown config key {prefix}{key}")
        for key, sub in schema.items():
            if key not in value:
                raise ConfigError(f"missing config key {prefix}{key}")
            _validate_section(sub, value[key], f"{prefix}{key}.")
    else:
        if isinstance(value, bool) and schema is not bool:
            raise ConfigError(f"bad type for {prefix[:-1]}: expected {schema}")
        if not isinstance(value, schema):
            raise ConfigError(
                f"bad type for {prefix[:-1]}: expected "
                f"{getattr(schema, '__name__', schema)}, got "
                f"{type(value).__name__}")


def load_config(path):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path) as fh:
        cfg = yaml.safe_load(fh)
    _validate_section(CONFIG_SCHEMA, cfg, "")
    return cfg


def _snapshot_config(cfg_path, run_dir):
    os.makedirs(run_dir, exist_ok=True)
    shutil.copyfile(cfg_path, os.path.join(run_dir, "config.yaml"))


def _pool_config(cfg):
    p = cfg["pool"]
    return PoolConfig(p["n_sigma"], p["n_tau"], p["cell_h"], p["cell_w"],
                      p["window_frames"], p["spatial_stride"])


def _extractor_config(cfg):
    e = cfg["extractor"]
    if not e["enabled"]:
        return None
    return ExtractorConfig(e["filters"], e["kernel"], e["kernel"], 1,
                           e["pool_window"], e["pool_stride"])


def _init_config(cfg):
    i = cfg["init"]
    return train.InitConfig(
        subvolumes_per_video=i["subvolumes_per_video"],
        pca_samples_per_video=i["pca_samples_per_video"],
        n_components=i["n_components"],
        mixture_components=i["mixture_components"],
        svm_c=float(i["svm_c"]), seed=cfg["seed"],
        em_iters=i["em_iters"], em_tol=float(i["em_tol"]),
        svm_epochs=i["svm_epochs"], svm_lr=float(i["svm_lr"]))


def _finetune_config(cfg):
    f = cfg["finetune"]
    return train.FinetuneConfig(
        optimizer=f["optimizer"], learning_rate=float(f["learning_rate"]),
        momentum=float(f["momentum"]), lr_decay=float(f["lr_decay"]),
        dropout_p=float(f["dropout"]), epochs=f["epochs"],
        spatial_stride=f["spatial_stride"],
        temporal_stride=f["temporal_stride"], seed=cfg["seed"])


def write_metrics(path, rows):
    with open(path, "w") as fh:
        fh.write("epoch,split,loss,accuracy\n")
        for epoch, split, loss, accuracy in rows:
            fh.write(f"{epoch},{split},{loss!r},{accuracy!r}\n")


def cmd_gen_data(args):
    cfg = load_config(args.config)
    g = cfg["gen"]
    data_dir = cfg["paths"]["data_dir"]
    data.generate_synthetic(data_dir, g["train_seed"], g["classes"],
                            g["per_class_train"], g["frames"], g["height"],
                            g["width"], split="train")
    data.generate_synthetic(data_dir, g["test_seed"], g["classes"],
                            g["per_class_test"], g["frames"], g["height"],
                            g["width"], split="test")
    print(f"wrote {g['classes'] * g['per_class_train']} train / "
          f"{g['classes'] * g['per_class_test']} test videos to {data_dir}")
    return 0


def cmd_init(args):
    cfg = load_config(args.config)
    data_dir = cfg["paths"]["data_dir"]
    run_dir = cfg["paths"]["run_dir"]
    _snapshot_config(args.config, run_dir)
    manifest = data.load_manifest(os.path.join(data_dir, "train.csv"),
                                  num_classes=cfg["gen"]["classes"],
                                  split="train")
    bundle = train.init_pipeline(
        manifest, data_dir, _init_config(cfg), _pool_config(cfg),
        extractor_cfg=_extractor_config(cfg),
        temporal_stride=cfg["finetune"]["temporal_stride"])
    out = os.path.join(run_dir, "bundle_init")
    save_bundle(out, bundle)
    print(f"initialized bundle saved to {out}")
    return 0


def cmd_finetune(args):
    cfg = load_config(args.config)
    data_dir = cfg["paths"]["data_dir"]
    run_dir = cfg["paths"]["run_dir"]
    _snapshot_config(args.config, run_dir)
    bundle = load_bundle(args.bundle
                         or os.path.join(run_dir, "bundle_init"))
    manifest = data.load_manifest(os.path.join(data_dir, "train.csv"),
                                  num_classes=cfg["gen"]["classes"],
                                  split="train")
    eval_manifest = None
    test_csv = os.path.join(data_dir, "test.csv")
    if os.path.exists(test_csv):
        eval_manifest = data.load_manifest(
            test_csv, num_classes=cfg["gen"]["classes"], split="test")
    bundle, metrics = train.finetune(bundle, manifest, data_dir,
                                     _finetune_config(cfg),
                                     eval_manifest=eval_manifest)
    out = os.path.join(run_dir, "bundle_finetuned")
    save_bundle(out, bundle)
    write_metrics(os.path.join(run_dir, "metrics.csv"), metrics)
    print(f"finetuned bundle saved to {out}")
    return 0


def cmd_eval(args):
    cfg = load_config(args.config)
    data_dir = cfg["paths"]["data_dir"]
    run_dir = cfg["paths"]["run_dir"]
    bundle = load_bundle(args.bundle)
    manifest = data.load_manifest(
        os.path.join(data_dir, f"{args.split}.csv"),
        num_classes=cfg["gen"]["classes"], split=args.split)
    stride = cfg["finetune"]["temporal_stride"]
    os.makedirs(run_dir, exist_ok=True)
    pred_path = os.path.join(run_dir, f"predictions_{args.split}.csv")
    correct = 0
    with open(pred_path, "w") as fh:
        header = ",".join(f"score_{j}" for j in range(manifest.num_classes))
        fh.write(f"video,label,predicted,{header}\n")
        for entry_path, label in manifest.entries:
            sample = data.load_video(data_dir, (entry_path, label))
            result = classify_video(sample.video, bundle, stride)
            correct += int(result.label == label)
            score_text = ",".join(repr(s) for s in result.scores)
            fh.write(f"{entry_path},{label},{result.label},{score_text}\n")
    accuracy = correct / len(manifest)
    print(f"{args.split} accuracy: {accuracy:.4f} "
          f"({correct}/{len(manifest)}); predictions in {pred_path}")
    return 0


def cmd_gradcheck(args):
    results = train.grad_check(layer=args.layer, seed=args.seed, step=args.h)
    ok = True
    for r in results:
        status = "pass" if r.passed else "FAIL"
        print(f"{r.layer:<14s} max_rel_err={r.max_rel_error:.3e} "
              f"tol={r.tolerance:.0e} {status}")
        ok = ok and r.passed
    return 0 if ok else 1


def cmd_params(args):
    counts = count_parameters(args.d, args.nc, args.k, args.m)
    for layer in ("projection", "gmm", "classifier"):
        print(f"{layer}: {counts[layer]}")
    print(f"total: {counts['total']}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fvnet",
        description="Fisher-vector network: data generation, two-phase "
                    "training, evaluation, and verification utilities.")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn, needs_config in (
            ("gen-data", cmd_gen_data, True),
            ("init", cmd_init, True)):
        p = sub.add_parser(name)
        p.add_argument("--config", "-c", required=True,
                       help="YAML run configuration")
        p.set_defaults(fn=fn)

    p = sub.add_parser("finetune")
    p.add_argument("--config", "-c", required=True)
    p.add_argument("--bundle", default=None,
                   help="bundle to start from (default: run_dir/bundle_init)")
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("eval")
    p.add_argument("--config", "-c", required=True)
    p.add_argument("--bundle", required=True, help="bundle directory")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck")
    p.add_argument("--layer", default="all",
                   choices=("all",) + tuple(train.GRAD_CHECK_TOLERANCES))
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--h", type=float, default=1e-5)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("params")
    p.add_argument("--nc", type=int, required=True,
                   help="projected descriptor dimensionality")
    p.add_argument("--k", type=int, required=True, help="mixture components")
    p.add_argument("--d", type=int, required=True,
                   help="pooled descriptor dimensionality")
    p.add_argument("--m", type=int, required=True, help="class count")
    p.set_defaults(fn=cmd_params)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, yaml.YAMLError) as exc:
        print(f"error:config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error:missing-file: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (DimMismatchError, BundleFormatError, TensorFileError) as exc:
        print(f"error:dim-mismatch: {exc}", file=sys.stderr)
        return EXIT_DIMS
    except (ValueError, train.NonFiniteError) as exc:
        print(f"error:invalid: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
