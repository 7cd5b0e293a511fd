"""Command-line front end.

Subcommands: ``generate`` (emit a problem file), ``run`` (experiment from a
config), ``verify`` (bound-verification suite), ``plot`` (re-render from a
previous run's CSVs).  Exit codes: 0 success, 1 verification failure,
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .harness import (
    ConfigError,
    GridSearchError,
    emit_plot,
    load_table,
    parse_config,
    run_experiment,
    verify_cli,
)
from .problems import generate_bilinear, save_problem

USAGE_ERROR = 2
VERIFICATION_FAILURE = 1


def _add_common_flags(parser: argparse.ArgumentParser, *, config_required: bool):
    parser.add_argument("--config", required=config_required,
                        help="path to the experiment config file")
    parser.add_argument("--output", help="output directory (overrides the config)")
    parser.add_argument("--seeds", help="comma-separated run seeds (override)")
    parser.add_argument("--budget", type=int, help="oracle-call budget (override)")
    parser.add_argument("--regime", choices=("small", "medium", "big"),
                        help="conditioning regime (override)")
    parser.add_argument("--method", help="comma-separated methods (override)")


def _overrides(args: argparse.Namespace) -> dict[str, str]:
    out: dict[str, str] = {}
    if args.output is not None:
        out["output_dir"] = args.output
    if args.seeds is not None:
        out["seeds"] = args.seeds
    if args.budget is not None:
        out["oracle_budget"] = str(args.budget)
    if args.regime is not None:
        out["regime"] = args.regime
    if args.method is not None:
        out["methods"] = args.method
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vrvi",
        description="Variance-reduced solvers and benchmarks for finite-sum "
                    "cocoercive variational inequalities.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="generate and save a problem instance")
    _add_common_flags(p_gen, config_required=True)

    p_run = sub.add_parser("run", help="run the comparison experiment")
    _add_common_flags(p_run, config_required=True)

    p_verify = sub.add_parser("verify", help="run the bound-verification suite")
    _add_common_flags(p_verify, config_required=True)

    p_plot = sub.add_parser("plot", help="re-render the comparison plot from CSVs")
    p_plot.add_argument("--output", required=True,
                        help="directory holding manifest.json and aggregate CSVs")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "plot":
            table = load_table(args.output)
            path = emit_plot(table, Path(args.output) / f"comparison_{table.regime}.svg")
            print(f"wrote {path}")
            return 0
        config = parse_config(args.config, _overrides(args))
        if args.command == "generate":
            out = Path(config.output_dir)
            out.mkdir(parents=True, exist_ok=True)
            path = save_problem(generate_bilinear(config.generator), out / "problem.txt")
            print(f"wrote {path}")
            return 0
        if args.command == "run":
            table = run_experiment(config)
            finals = {name: stats.mean_residual_sq[-1]
                      for name, stats in table.stats.items()}
            for name in sorted(finals):
                print(f"{name}: final mean residual_sq = {finals[name]:.6e}")
            print(f"outputs under {config.output_dir}")
            return 0
        if args.command == "verify":
            return verify_cli(config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except GridSearchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    raise AssertionError(f"unhandled command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
