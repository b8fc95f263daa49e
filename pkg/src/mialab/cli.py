"""Command-line entry point.

Subcommands: train, attack, sweep, analyze, boundary. Settings come from a
key = value config file (or a run manifest JSON); individual flags override
file values. Exit codes: 0 ok, 1 configuration error, 2 runtime error.
"""

import argparse
import json
import sys

from . import harness
from .errors import ConfigError, MialabError, ParseError

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

# flags that override config-file fields, with their CLI spellings
OVERRIDE_FIELDS = (
    "dataset", "data_mode", "classes", "dim", "per_class", "class_separation",
    "noise_sigma", "label_col", "feature_kind", "hidden_dims", "activation",
    "dropout_rate", "method", "alpha", "alpha_ls", "alpha_cp", "flatten_scope",
    "gt_cap", "epochs", "batch_size", "checkpoint_epochs", "lr", "momentum",
    "weight_decay", "lr_schedule", "attacks", "seed_data", "seed_init",
    "seed_batch", "seed_attack", "outdir",
)


def _add_config_flags(parser):
    parser.add_argument("--config", help="key = value config file or manifest JSON")
    for field in OVERRIDE_FIELDS:
        parser.add_argument(f"--{field.replace('_', '-')}", dest=field,
                            metavar="V", default=None)


def _build_config(args):
    overrides = {
        field: getattr(args, field)
        for field in OVERRIDE_FIELDS
        if getattr(args, field, None) is not None
    }
    if args.config:
        return harness.ExperimentConfig.from_file(args.config, overrides)
    return harness.ExperimentConfig.from_mapping(overrides)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mialab",
        description="Membership-inference lab: train, attack, sweep, analyze.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a target model into a run directory")
    _add_config_flags(p_train)

    p_attack = sub.add_parser("attack", help="calibrate and evaluate attacks on a run")
    p_attack.add_argument("run_dir")
    p_attack.add_argument("--attacks", default=None,
                          help="comma-separated subset (default: manifest list)")
    p_attack.add_argument("--adaptive", action="store_true",
                          help="calibrate on a shadow trained with the defense config")

    p_sweep = sub.add_parser("sweep", help="independent runs across hyperparameter values")
    _add_config_flags(p_sweep)
    p_sweep.add_argument("--param", required=True, choices=harness.SWEEP_PARAMS)
    p_sweep.add_argument("--values", required=True,
                         help="comma-separated hyperparameter values")

    p_analyze = sub.add_parser("analyze", help="loss statistics and bound reports")
    p_analyze.add_argument("run_dirs", nargs="+")
    p_analyze.add_argument("--out", default=None, help="output JSON path")
    p_analyze.add_argument("--bins", type=int, default=30)
    p_analyze.add_argument("--correlation", action="store_true", default=None,
                           help="force the cross-run correlation (needs >= 2 runs)")

    p_boundary = sub.add_parser("boundary", help="posterior grid dump for 2-D models")
    p_boundary.add_argument("run_dir")
    p_boundary.add_argument("--xmin", type=float, default=-5.0)
    p_boundary.add_argument("--xmax", type=float, default=5.0)
    p_boundary.add_argument("--ymin", type=float, default=-5.0)
    p_boundary.add_argument("--ymax", type=float, default=5.0)
    p_boundary.add_argument("--steps", type=int, default=100)
    return parser


def _run(args):
    if args.command == "train":
        run_dir = harness.cmd_train(_build_config(args))
        print(run_dir)
        return EXIT_OK
    if args.command == "attack":
        attack_list = args.attacks.split(",") if args.attacks else None
        results = harness.cmd_attack(args.run_dir, attack_list, args.adaptive)
        for r in results:
            print(f"{r.attack_name}: accuracy={r.target_accuracy:.4f} "
                  f"auc={r.target_auc:.4f}")
        return EXIT_OK
    if args.command == "sweep":
        config = _build_config(args)
        values = [v.strip() for v in args.values.split(",") if v.strip()]
        caster = int if args.param == "epochs" else float
        _, ok = harness.cmd_sweep(config, args.param, [caster(v) for v in values])
        print(f"{config.outdir}/sweep.csv")
        return EXIT_OK if ok else EXIT_RUNTIME
    if args.command == "analyze":
        report = harness.cmd_analyze(args.run_dirs, histogram_bins=args.bins,
                                     correlation=args.correlation)
        if args.out:
            harness.write_analysis(report, args.out)
            print(args.out)
        else:
            json.dump(report, sys.stdout, sort_keys=True, indent=1)
            print()
        return EXIT_OK
    if args.command == "boundary":
        rows = harness.cmd_boundary(args.run_dir, args.xmin, args.xmax,
                                    args.ymin, args.ymax, args.steps)
        print(f"{args.run_dir}/boundary.csv ({len(rows)} rows)")
        return EXIT_OK
    raise ConfigError(f"unknown command {args.command!r}")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _run(args)
    except (ConfigError, ParseError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (MialabError, OSError, ValueError) as err:
        print(f"runtime error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
