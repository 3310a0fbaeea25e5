"""Command-line entry point.

Verbs: gen-data, train, eval, ablate, grad-check. Options come from an
optional flat `key = value` config file plus flags; flags win. Exit codes:
0 success, 2 bad configuration or arguments, 3 numeric failure during a run.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

from . import data, gradsuite, training
from .config import (ACB_DEPTHS, ConfigError, FUSION_VARIANTS, MASK_MODES,
                     ModelConfig, TrainConfig, config_from_mapping,
                     load_config_file)
from .metrics import EvalReport
from .training import NumericError, Trainer

_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}


def split_mapping(mapping):
    """Partition a flat config mapping into (model, train) sub-mappings."""
    model, train = {}, {}
    for key, value in mapping.items():
        if key.startswith("loss.") or key in _MODEL_KEYS:
            model[key] = value
        elif key in _TRAIN_KEYS:
            train[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return model, train


def build_configs(args):
    mapping = load_config_file(args.config) if args.config else {}
    model_map, train_map = split_mapping(mapping)
    # flags override the file; only explicitly-passed flags land in overrides
    # (store_true switches are merged separately so their False default
    # cannot clobber a config-file setting)
    switches = ("verb", "config", "resume", "func", "axis",
                "biased_prior", "no_edge_branch", "no_seg_branch")
    for key, value in vars(args).items():
        if value is None or key in switches:
            continue
        if key in _MODEL_KEYS:
            model_map[key] = value
        elif key in _TRAIN_KEYS:
            train_map[key] = value
    if getattr(args, "no_edge_branch", False):
        model_map["use_edge_branch"] = False
    if getattr(args, "no_seg_branch", False):
        model_map["use_seg_branch"] = False
    if getattr(args, "biased_prior", False):
        model_map["biased_prior"] = True
    mcfg = config_from_mapping(ModelConfig, model_map).validate()
    tcfg = config_from_mapping(TrainConfig, train_map).validate()
    return mcfg, tcfg


def add_model_flags(p):
    p.add_argument("--fusion", choices=FUSION_VARIANTS, default=None,
                   help="feature fusion variant ahead of the attention")
    p.add_argument("--acb-depth", dest="acb_depth", type=int,
                   choices=ACB_DEPTHS, default=None,
                   help="number of adaptive dilation blocks in the bottleneck")
    p.add_argument("--biased-prior", action="store_true",
                   help="condition fusion on predicted edge/segmentation maps")
    p.add_argument("--no-edge-branch", action="store_true")
    p.add_argument("--no-seg-branch", action="store_true")
    p.add_argument("--image-size", dest="image_size", type=int, default=None)
    p.add_argument("--base-channels", dest="base_channels", type=int, default=None)
    p.add_argument("--precision", choices=("float32", "float64"), default=None)


def add_train_flags(p):
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--mask-mode", dest="mask_mode", choices=MASK_MODES, default=None)
    p.add_argument("--lr-g", dest="lr_g", type=float, default=None)
    p.add_argument("--lr-d", dest="lr_d", type=float, default=None)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, default=None)
    p.add_argument("--log-every", dest="log_every", type=int, default=None)
    p.add_argument("--data", dest="data_path", default=None)
    p.add_argument("--out", dest="out_dir", default=None)


def make_parser():
    parser = argparse.ArgumentParser(prog="trifill")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen-data", help="write a procedural training dataset")
    p.add_argument("--out", default="train.trif")
    p.add_argument("--count", type=int, default=512)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    add_model_flags(p)
    add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mask-mode", dest="mask_mode", choices=MASK_MODES, default=None,
                   help="single mode; default reports every mode")
    p.add_argument("--mask-seed", dest="mask_seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--dump", type=int, default=0,
                   help="write input|output|target strips for the first N samples")
    p.add_argument("--out", default=None, help="directory for CSV and image dumps")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and score the config grid")
    p.add_argument("--config", default=None)
    p.add_argument("--axis", action="append", default=None,
                   choices=training.ABLATION_AXES + ("all",),
                   help="repeatable; default all axes")
    add_model_flags(p)
    add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("grad-check", help="finite-difference audit of the engine")
    p.set_defaults(func=cmd_grad_check)
    return parser


def cmd_gen_data(args):
    ds = data.build_dataset(args.out, args.count, height=args.size,
                            width=args.size, k_classes=args.classes, seed=args.seed)
    print(f"wrote {len(ds)} samples ({args.size}x{args.size}, "
          f"{args.classes} classes) to {args.out}")
    return 0


def cmd_train(args):
    mcfg, tcfg = build_configs(args)
    trainer = training.run_training(mcfg, tcfg, resume=args.resume, echo=print)
    print(f"finished at step {trainer.step}; "
          f"checkpoint in {os.path.join(trainer.tcfg.out_dir, 'checkpoint.bin')}")
    return 0


def cmd_eval(args):
    trainer = Trainer.restore(args.checkpoint)
    ds = data.load_dataset(args.data)
    modes = (args.mask_mode,) if args.mask_mode else MASK_MODES
    dump_dir = args.out
    if dump_dir:
        os.makedirs(dump_dir, exist_ok=True)
    reports = training.evaluate_bands(
        trainer, ds, modes=modes, mask_seed=args.mask_seed,
        max_samples=args.samples, dump_dir=dump_dir, dump_count=args.dump)
    for mode, report in reports.items():
        print(f"[{mode}]")
        print(report.to_text())
    if dump_dir:
        csv_path = os.path.join(dump_dir, "eval.csv")
        with open(csv_path, "w", encoding="utf-8") as f:
            f.write("mask_mode," + EvalReport.CSV_HEADER + "\n")
            for mode, report in reports.items():
                f.write(f"{mode},{report.to_csv_row()}\n")
        print(f"wrote {csv_path}")
    return 0


def cmd_ablate(args):
    mcfg, tcfg = build_configs(args)
    axes = tuple(args.axis) if args.axis else ("all",)
    if "all" in axes:
        axes = training.ABLATION_AXES
    rows_by_axis = training.run_ablation(mcfg, tcfg, axes=axes, echo=print)
    tables = training.ablation_tables(rows_by_axis)
    paths = training.write_tables(tables, tcfg.out_dir)
    for name, path in sorted(paths.items()):
        print(f"wrote {path}")
    return 0


def cmd_grad_check(args):
    results = gradsuite.run_suite()
    print(gradsuite.format_results(results))
    if any(err >= tol for _, err, tol in results):
        raise NumericError("gradient audit failed")
    return 0


def main(argv=None):
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except (OSError, ValueError) as e:  # unreadable/corrupt dataset or checkpoint
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
