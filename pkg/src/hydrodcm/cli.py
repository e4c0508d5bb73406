"""Command-line interface.

Subcommands:
    gen-data   write a synthetic world as series/metadata CSV files
    train      run one experiment (all seeds) into an output directory
    eval       score a saved checkpoint on the configured data
    compare    base / fewshot / oracle / dann / hydrodcm on one shared world
    ablate     full model against its four ablations

Every subcommand echoes the resolved configuration to
`effective_config.txt` in its output directory and exits 0 only when all
requested work completed.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, parse_config, write_effective_config
from .data import (IngestError, build_split, corrupt_metadata, dump_world_csv,
                   generate_world)
from .experiments import run_ablate, run_compare
from .rng import Rng
from .train import (MODE_SPLIT, SPATIAL_NOISE_STD, load_records,
                    run_experiment, test_nse_report, write_nse_csv)


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="config file (omit for all defaults)")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config key")
    parser.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hydrodcm",
        description="Cross-reservoir inflow forecasting experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic world to CSV")
    _add_common(p)

    p = sub.add_parser("train", help="train one experiment configuration")
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--run-seed", type=int, default=None,
                   help="run seed used for metadata-corrupting ablations "
                        "(defaults to train.seed)")

    p = sub.add_parser("compare", help="run the mode comparison table")
    _add_common(p)

    p = sub.add_parser("ablate", help="run the ablation table")
    _add_common(p)
    return parser


def _cmd_gen_data(cfg, out_dir) -> int:
    records = generate_world(cfg.world)
    dump_world_csv(records,
                   os.path.join(out_dir, "series.csv"),
                   os.path.join(out_dir, "metadata.csv"))
    print(f"wrote {len(records)} reservoirs to {out_dir}/series.csv")
    return 0


def _cmd_train(cfg, out_dir) -> int:
    reports = run_experiment(cfg, out_dir)
    failed = [r.seed for r in reports if r.failed]
    for r in reports:
        if r.failed:
            print(f"run {r.seed}: FAILED ({r.error})", file=sys.stderr)
        else:
            print(f"run {r.seed}: overall NSE {100 * r.nse.overall:.2f}%"
                  f" (best epoch {r.best_epoch})")
    return 1 if failed else 0


def _cmd_eval(cfg, out_dir, checkpoint_path, run_seed) -> int:
    bundle = load_checkpoint(checkpoint_path)
    records = load_records(cfg)
    # windows are built with the checkpoint's stored stats so the scores
    # reproduce the training run's nse.csv exactly
    split = build_split(records, MODE_SPLIT[cfg.mode], stats=bundle.norm_stats)
    if cfg.ablation == "spatial_shuffle":
        seed = cfg.seed if run_seed is None else run_seed
        corrupt_metadata(split, Rng(seed).spawn("spatial"), SPATIAL_NOISE_STD)
    report = test_nse_report(bundle, split.test, cfg.nse_aggregate)
    write_nse_csv(os.path.join(out_dir, "nse.csv"), report)
    for rid in sorted(report.per_reservoir_overall):
        print(f"{rid}: overall NSE {100 * report.per_reservoir_overall[rid]:.2f}%")
    print(f"macro overall NSE {100 * report.overall:.2f}%")
    return 0


def _cmd_compare(cfg, out_dir) -> int:
    ok = run_compare(cfg, out_dir)
    print(f"comparison table: {out_dir}/comparison.csv"
          + ("" if ok else "  (INCOMPLETE: some cells failed)"))
    return 0 if ok else 1


def _cmd_ablate(cfg, out_dir) -> int:
    ok = run_ablate(cfg, out_dir)
    print(f"ablation table: {out_dir}/ablation.csv"
          + ("" if ok else "  (INCOMPLETE: some cells failed)"))
    return 0 if ok else 1


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config, args.overrides)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    os.makedirs(args.out, exist_ok=True)
    write_effective_config(cfg, os.path.join(args.out, "effective_config.txt"))
    try:
        if args.command == "gen-data":
            return _cmd_gen_data(cfg, args.out)
        if args.command == "train":
            return _cmd_train(cfg, args.out)
        if args.command == "eval":
            return _cmd_eval(cfg, args.out, args.checkpoint, args.run_seed)
        if args.command == "compare":
            return _cmd_compare(cfg, args.out)
        if args.command == "ablate":
            return _cmd_ablate(cfg, args.out)
    except (IngestError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
