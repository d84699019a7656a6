#!/usr/bin/env python
"""
Command-line entry point for the normalization lab.

    normlab <sweep-alpha|sweep-ghost|compare|non-iid|bounds|weight-decay>
            --config <path.json> --out <dir> [--seed N] [--jobs N]
    normlab serve [--host H] [--port P]

Exit codes: 0 success, 2 configuration or input error, 3 numeric or training failure.
"""

import argparse
import logging
import os
import sys
from typing import List, Optional

from pydantic import ValidationError

from errors import CONFIG_EXIT_CODE, ConfigurationError, NormLabError, exit_code_for
from experiments import COMMANDS, load_spec, run_experiment

logger = logging.getLogger("normlab")

SEED_ENV = "NORMLAB_SEED"


def parse_arguments(argv: Optional[List[str]] = None):
    """Parse command-line arguments."""
    parser = argparse.ArgumentParser(
        prog="normlab",
        description="Normalization scheme experiments on synthetic data.")
    parser.add_argument("--verbose", "-v", action="store_true", help="Log debug messages")
    subparsers = parser.add_subparsers(dest="command", required=True)

    for command in COMMANDS:
        sub = subparsers.add_parser(command, help=f"Run the {command} experiment")
        sub.add_argument("--config", "-c", help="Path to an experiment JSON file")
        sub.add_argument("--out", "-o", help="Directory to write result files to")
        sub.add_argument("--seed", type=int, default=None,
                         help=f"Experiment seed (overrides {SEED_ENV} and the config)")
        sub.add_argument("--jobs", "-j", type=int, default=None,
                         help="Number of training runs to execute in parallel")

    serve = subparsers.add_parser("serve", help="Start the HTTP job service")
    serve.add_argument("--host", default="0.0.0.0")
    serve.add_argument("--port", type=int, default=8000)
    return parser.parse_args(argv)


def resolve_seed(cli_seed: Optional[int]) -> Optional[int]:
    """--seed wins over NORMLAB_SEED; None leaves the config value in place."""
    if cli_seed is not None:
        return cli_seed
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is None or env_seed.strip() == "":
        return None
    try:
        return int(env_seed)
    except ValueError:
        raise ConfigurationError(f"{SEED_ENV} must be an integer, got {env_seed!r}")


def configure_logging(verbose: bool):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def main(argv: Optional[List[str]] = None) -> int:
    """Run one command and return its exit code."""
    args = parse_arguments(argv)
    configure_logging(args.verbose)

    if args.command == "serve":
        import uvicorn
        uvicorn.run("server:app", host=args.host, port=args.port)
        return 0

    try:
        spec = load_spec(args.config, command=args.command, out=args.out,
                         seed=resolve_seed(args.seed), jobs=args.jobs)
        files = run_experiment(spec, args.command)
    except ValidationError as e:
        logger.error("Invalid configuration: %s", e)
        return CONFIG_EXIT_CODE
    except NormLabError as e:
        logger.error("%s failed: %s", args.command, e)
        return exit_code_for(e)

    for path in files:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
