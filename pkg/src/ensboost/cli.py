"""Command line: ``ensboost {synthesize,train,generate,evaluate,...}``.

Exit codes: 0 success, 2 config/argument error, 3 data error,
4 numerical divergence.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import config as cfgmod
from . import pipeline
from .errors import ConfigError, DataError, EnsboostError

log = logging.getLogger("ensboost")

THREADS_ENV = "ENSBOOST_THREADS"


def _default_threads():
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _common_flags(suppress):
    # subcommand copies default to SUPPRESS so they never clobber flags given
    # before the subcommand name
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=d(None),
                        help="YAML run configuration (defaults if omitted)")
    common.add_argument("--seed", type=int, default=d(None),
                        help="override every seed in the configuration")
    common.add_argument("--threads", type=int, default=d(None),
                        help=f"worker threads (default ${THREADS_ENV} or 1)")
    common.add_argument("-v", "--verbose", action="count", default=d(0))
    return common


def build_parser():
    top = _common_flags(False)
    common = _common_flags(True)

    parser = argparse.ArgumentParser(
        prog="ensboost", parents=[top],
        description="Boost a climate ensemble with a conditional VAE trained on one member.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", parents=[common],
                       help="write a synthetic climate-like ensemble")
    p.add_argument("out", help="output .ens file")

    p = sub.add_parser("train", parents=[common], help="train the cVAE on one member")
    p.add_argument("ens", help="input .ens file")
    p.add_argument("checkpoint", help="output checkpoint")
    p.add_argument("--member", type=int, help="training member index (default data.train_member)")
    p.add_argument("--log", help="per-epoch CSV log (default <checkpoint>.log.csv)")
    p.add_argument("--resume", help="start from this checkpoint")
    p.add_argument("--epochs", type=int, help="epochs to run (overrides train.max_epochs)")

    p = sub.add_parser("generate", parents=[common], help="generate a boosted ensemble")
    p.add_argument("checkpoint")
    p.add_argument("conditioning", help=".ens holding the conditioning realization")
    p.add_argument("out", help="output .ens file")
    p.add_argument("--mode", choices=["VAE", "VAE_DN"], help="override inference.mode")
    p.add_argument("--members", type=int, help="override inference.n_members")
    p.add_argument("--member-id", help="conditioning member id (default: training member)")
    p.add_argument("--no-bias-correction", action="store_true")
    p.add_argument("--refresh-cache", action="store_true",
                   help="re-estimate the latent prior and decoder noise")

    p = sub.add_parser("evaluate", parents=[common], help="compare boosted vs population")
    p.add_argument("boosted")
    p.add_argument("population")
    p.add_argument("train", help=".ens with the training realization")
    p.add_argument("out_dir")
    p.add_argument("--member", type=int, help="training member index inside the train file")

    p = sub.add_parser("subset", parents=[common], help="select or drop ensemble members")
    p.add_argument("ens")
    p.add_argument("out")
    p.add_argument("--members", nargs="+", help="member ids or indices to keep")
    p.add_argument("--exclude", nargs="+", help="member ids to drop")

    p = sub.add_parser("convert", parents=[common], help="long-format CSV to .ens")
    p.add_argument("csv", help="CSV with columns member_id,year,month,lat,lon,value")
    p.add_argument("out")

    p = sub.add_parser("pipeline", parents=[common],
                       help="synthesize, train, generate and evaluate in one directory")
    p.add_argument("workdir")

    p = sub.add_parser("show-config", parents=[common], help="print the resolved configuration")
    return parser


def _run(args, cfg, threads):
    cmd = args.command
    if cmd == "synthesize":
        series = pipeline.synthesize(cfg, args.out)
        for line in pipeline.summary_lines(series):
            print(line)
    elif cmd == "train":
        model, tlog = pipeline.train_stage(cfg, args.ens, args.checkpoint, args.log,
                                           args.member, args.resume, args.epochs)
        if tlog.records:
            best = tlog.records[tlog.best_epoch]
            print(f"epochs={len(tlog.records)} best_epoch={tlog.best_epoch} "
                  f"val_mse={best['val_mse']:.6f} val_kl={best['val_kl']:.4f}"
                  + (" POSTERIOR-COLLAPSE-WARNING" if tlog.collapse_warning else ""))
        print(f"checkpoint {args.checkpoint}")
    elif cmd == "generate":
        if args.mode:
            cfg["inference"]["mode"] = args.mode
        if args.members is not None:
            cfg["inference"]["n_members"] = args.members
        if args.no_bias_correction:
            cfg["inference"]["bias_correction"] = False
        out = pipeline.generate_stage(cfg, args.checkpoint, args.conditioning, args.out,
                                      threads, args.member_id, args.refresh_cache)
        for line in pipeline.summary_lines(out):
            print(line)
    elif cmd == "evaluate":
        report = pipeline.evaluate_stage(cfg, args.boosted, args.population, args.train,
                                         args.out_dir, args.member)
        for name in report.names("scalar"):
            if name.startswith(("corr_", "rmse_", "qq_slope")):
                print(f"{name} {report[name].value:.6g}")
        print(f"report {args.out_dir} ({len(report.entries)} entries)")
    elif cmd == "subset":
        out = pipeline.subset_stage(args.ens, args.out, args.members, args.exclude)
        print(f"{out.n_members} members -> {args.out}")
    elif cmd == "convert":
        from .data import csv_to_field_series, write_field_series
        series = csv_to_field_series(args.csv, {"config_hash": cfgmod.config_hash(cfg)})
        write_field_series(series, args.out)
        for line in pipeline.summary_lines(series):
            print(line)
    elif cmd == "pipeline":
        paths = pipeline.pipeline_stage(cfg, args.workdir, threads)
        print(f"report {paths['report']}")
    elif cmd == "show-config":
        print(cfgmod.dump_config(cfg), end="")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    threads = args.threads if args.threads is not None else _default_threads()
    if threads < 1:
        parser.error("--threads must be >= 1")
    try:
        cfg = cfgmod.load_config(args.config, args.seed)
        _run(args, cfg, threads)
    except EnsboostError as exc:
        print(f"ensboost: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (IndexError, KeyError) as exc:
        print(f"ensboost: error: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    except (OSError, TypeError) as exc:
        print(f"ensboost: error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
