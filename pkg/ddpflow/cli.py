"""
Command-line entry point.

    ddpf generate|place|run|verify --config <path> [--case <path>]
         [--budget <int,int,...>] [--seed <int>] [--out <dir>]

Exit codes: 0 success, 1 a verification criterion failed, 2 usage or
input error.
"""

import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence

from . import __version__
from .acceptance import run_acceptance
from .config import PipelineConfig, load_pipeline_config
from .exceptions import ConvergenceError, DdpfException, SolverError, TopologyError, ValidationError
from .pipeline import DdpfPipeline

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2


def _budget_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"bad budget list {text!r}") from e


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ddpf", description="Data-driven DistFlow with sparse measurements"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline configuration (JSON or YAML)")
    common.add_argument("--case", help="case file (.m/.json) or synthetic:<nodes>[:<seed>]")
    common.add_argument("--budget", type=_budget_list, help="comma-separated sensor budgets")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--workers", type=int, help="worker threads")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="generate train/test datasets")
    sub.add_parser("place", parents=[common], help="sensor placement per budget")
    sub.add_parser("run", parents=[common], help="reduced DDPF over the test horizon")
    verify = sub.add_parser("verify", parents=[common], help="run the acceptance suite")
    verify.add_argument(
        "--only", type=_budget_list, help="comma-separated criterion ids to run"
    )
    return parser


def _config(args: argparse.Namespace) -> PipelineConfig:
    return load_pipeline_config(
        args.config,
        case=args.case,
        budgets=args.budget,
        seed=args.seed,
        out_dir=args.out,
        workers=args.workers,
    )


def _print(payload: Any) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def cmd_generate(config: PipelineConfig) -> int:
    with DdpfPipeline(config) as pipe:
        summary = pipe.generate()
    _print(summary)
    return EXIT_OK


def cmd_place(config: PipelineConfig) -> int:
    with DdpfPipeline(config) as pipe:
        rows = pipe.place()
    _print(rows)
    return EXIT_OK


def cmd_run_ddpf(config: PipelineConfig) -> int:
    with DdpfPipeline(config) as pipe:
        rows = pipe.evaluate()
    _print(rows)
    return EXIT_OK


def cmd_verify(config: PipelineConfig, only: Optional[Sequence[int]] = None) -> int:
    report = run_acceptance(config, list(only) if only else None)
    payload: Dict[str, Any] = report.to_dict()
    os.makedirs(config.out_dir, exist_ok=True)
    with open(os.path.join(config.out_dir, "verify.json"), "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(os.path.join(config.out_dir, "verify_timings.json"), "w", encoding="utf-8") as f:
        json.dump(report.timings(), f, indent=2, sort_keys=True)
    _print(payload)
    return EXIT_OK if report.passed else EXIT_FAILED


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        config = _config(args)
        if args.command == "generate":
            return cmd_generate(config)
        if args.command == "place":
            return cmd_place(config)
        if args.command == "run":
            return cmd_run_ddpf(config)
        return cmd_verify(config, args.only)
    except (ValidationError, TopologyError, FileNotFoundError, IsADirectoryError) as e:
        print(f"ddpf: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ConvergenceError, SolverError, DdpfException) as e:
        print(f"ddpf: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
