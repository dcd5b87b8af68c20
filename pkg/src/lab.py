# Copyright 2026 The pclab authors
# See LICENSE file for licensing details.

"""Command line entry point: `pclab run|sweep|emit-plot-data|validate`.

Exit status: 0 pass, 2 inconclusive, 1 fail or error. Config values may be
overridden through PCLAB__SECTION__KEY environment variables; the flags below
override both the file and the environment.
"""

import argparse
import logging
import sys
from typing import Any, Dict, List, Optional

from errors import ConfigError, LabError
from harness import emit_plot_data, exit_code, run, sweep
from lab_config import load_config, merge

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pclab",
        description="Cluster-expansion lab for homogenized coefficients of random inclusions.",
    )
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    verbs = parser.add_subparsers(dest="verb", required=True)

    def with_config(name: str, help_text: str) -> argparse.ArgumentParser:
        sub = verbs.add_parser(name, help=help_text)
        sub.add_argument("--config", default=None, help="YAML experiment config.")
        sub.add_argument("--seed", type=int, default=None, help="Master seed (unsigned 64-bit).")
        sub.add_argument("--out", default=None, help="Output directory.")
        sub.add_argument("--workers", type=int, default=None, help="Realizations solved concurrently.")
        return sub

    with_config("run", "Run one experiment.")
    sweep_parser = with_config("sweep", "Repeat the base experiment along one axis.")
    sweep_parser.add_argument("--axis", choices=["T", "h", "L", "N", "n"], default=None)
    sweep_parser.add_argument("--values", type=float, nargs="+", default=None)
    with_config("validate", "Validate a config and print its run id.")

    emit = verbs.add_parser("emit-plot-data", help="Write plot CSVs from persisted reports.")
    emit.add_argument("--out", default="results", help="Results directory to scan.")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    if args.seed is not None:
        overrides = merge(overrides, {"monte_carlo": {"seed": args.seed}})
    if args.workers is not None:
        overrides = merge(overrides, {"monte_carlo": {"workers": args.workers}})
    if args.out is not None:
        overrides = merge(overrides, {"output": {"directory": args.out}})
    if getattr(args, "axis", None) is not None:
        overrides = merge(overrides, {"kind": "sweep", "sweep": {"axis": args.axis}})
    if getattr(args, "values", None) is not None:
        overrides = merge(overrides, {"sweep": {"values": args.values}})
    return overrides


def main(argv: Optional[List[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT, stream=sys.stderr)

    try:
        if args.verb == "emit-plot-data":
            result = emit_plot_data(args.out)
            for name, reason in result.missing.items():
                print(f"missing {name}: {reason}")
            for name, checksum in result.written.items():
                print(f"{checksum}  {name}")
            return 0

        config = load_config(args.config, _overrides(args))
        if args.verb == "validate":
            print(config.run_id)
            return 0
        if args.verb == "sweep":
            record = sweep(config, config.sweep.axis, config.sweep.values)
        else:
            record = run(config)
    except ConfigError as e:
        logger.error("invalid configuration: %s", e)
        return 1
    except LabError as e:
        logger.error("experiment aborted: %s", e)
        return 1

    print(f"{record.config_hash} {record.verdict}")
    return exit_code(record.verdict)


if __name__ == "__main__":
    sys.exit(main())
