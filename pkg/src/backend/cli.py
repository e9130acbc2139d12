"""
Command-line surface.

    vip <stage> --config run.json [--seed N] [--out DIR] [--threads N] [--resume CKPT]

Stages: synth, measure, train, reconstruct, baseline, select, report, run.
Exit codes: 0 ok, 2 configuration error, 3 numerical failure.
"""

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

import structlog
from pydantic import ValidationError

from src.backend.core.config import settings
from src.backend.core.exceptions import VariationalImagingException
from src.backend.core.logging_config import configure_logging
from src.backend.services.experiment_runner import ExperimentRunner, load_config

logger = structlog.get_logger()

STAGES = ["synth", "measure", "train", "reconstruct", "baseline", "select", "report"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _seed(value: str) -> int:
    seed = int(value)
    if not 0 <= seed < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return seed


def _threads(value: str) -> int:
    threads = int(value)
    if threads < 1:
        raise argparse.ArgumentTypeError("threads must be at least 1")
    return threads


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vip", description="Joint variational reconstruction of imaging inverse problems")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name in STAGES + ["run"]:
        sub = subparsers.add_parser(name, help=f"Run the {name} stage" if name != "run" else "Run the full pipeline")
        sub.add_argument("--config", type=Path, required=True, help="Experiment config JSON")
        sub.add_argument("--seed", type=_seed, default=None, help="Override the config seed")
        sub.add_argument("--out", type=Path, default=None, help="Artifact directory")
        sub.add_argument("--threads", type=_threads, default=None,
                         help=f"Worker threads (default: config, or VIP_THREADS={settings.DEFAULT_THREADS})")
        if name in ("train", "run"):
            sub.add_argument("--resume", type=Path, default=None, help="Checkpoint to resume training from")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging()

    try:
        config = load_config(args.config)
        threads = args.threads
        if threads is None and "threads" not in config.model_fields_set:
            threads = settings.DEFAULT_THREADS
        runner = ExperimentRunner(config, output_dir=args.out, seed=args.seed, threads=threads)
        resume = getattr(args, "resume", None)

        if args.command == "run":
            summary = runner.run(resume)
            print(json.dumps(summary.model_dump(mode="json"), indent=2, sort_keys=True))
        else:
            runner.store.ensure()
            runner.run_stage(args.command, resume)
            print(str(runner.store.root))
        return EXIT_OK

    except VariationalImagingException as e:
        logger.error("Run failed", error=e.message, error_code=e.error_code, details=e.details)
        print(f"error [{e.error_code}]: {e.message}", file=sys.stderr)
        return e.exit_code if e.exit_code in (EXIT_CONFIG, EXIT_NUMERICAL) else EXIT_CONFIG
    except ValidationError as e:
        logger.error("Invalid configuration", errors=e.errors(include_url=False))
        print(f"error [configuration_error]: {e.error_count()} validation error(s)", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
