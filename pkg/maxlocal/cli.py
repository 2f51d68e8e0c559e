"""
Command-line entry point.

Config precedence, lowest first: built-in defaults, the key-value file given
with --config, the MAXLOCAL_SEED / MAXLOCAL_WORKERS environment variables
(a .env file is loaded if present), explicit flags.

Exit status: 0 on success, 1 when a hard invariant fails, 2 for an invalid
config, 130 after an interrupt (a checkpoint is written first).
"""

import argparse
import logging
import os
import sys
from typing import Any, Dict, List, Optional

from dotenv import dotenv_values, load_dotenv
from pydantic import ValidationError

from maxlocal.constants import (
    ENV_SEED,
    ENV_WORKERS,
    MAXLOCAL_VERSION,
    Direction,
    LawKind,
    Subcommand,
    WalkMode,
)
from maxlocal.core import LocalTimeLab
from maxlocal.errors import ExperimentInterrupted, InvariantViolation
from maxlocal.lattice import lattice_constants
from maxlocal.models import ExperimentConfig
from maxlocal.preprocessor import ConfigPreprocessor
from maxlocal.utils import split_list

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s [%(levelname)s] [%(name)s] %(message)s"
LIST_FIELDS = ("horizons", "radii", "y")
# Settings that never enter ExperimentConfig.
RUNTIME_KEYS = ("config", "log_level", "stop_at")


def _common_options() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    parser.add_argument("--config", help="Key-value config file (field=value per line)")
    parser.add_argument("--log-level", dest="log_level", default="INFO")
    parser.add_argument("--d", type=int, help="Lattice dimension, d >= 3")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--reps", type=int, help="Replicates per stage")
    parser.add_argument("--workers", type=int, help="Worker processes")
    parser.add_argument("--chunk-size", dest="chunk_size", type=int)
    parser.add_argument("--reservoir", type=int, help="Samples kept for KS statistics")
    parser.add_argument("--output-dir", dest="output_dir")
    parser.add_argument("--checkpoint", help="Checkpoint file, written after each chunk")
    parser.add_argument("--name", help="Run name (default: derived from the config)")
    parser.add_argument("--no-plot", dest="plot", action="store_false")
    parser.add_argument(
        "--stop-at",
        dest="stop_at",
        type=int,
        help="Interrupt each stage after this many replicates",
    )
    return parser


def _horizon_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--n", "--t", "--horizons", dest="horizons", type=float, nargs="+"
    )


def _mode_option(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--mode", choices=[m.value for m in WalkMode])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maxlocal",
        description="Maximum local time of simple random walk on Z^d, d >= 3.",
    )
    parser.add_argument("--version", action="version", version=MAXLOCAL_VERSION)
    common = _common_options()
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add(name: str, help: str) -> argparse.ArgumentParser:
        # Unset flags stay out of the namespace so lower layers show through.
        return sub.add_parser(
            name, parents=[common], help=help, argument_default=argparse.SUPPRESS
        )

    constants = add(Subcommand.CONSTANTS.value, "Lattice constants")
    constants.add_argument("--radii", type=int, nargs="+")
    constants.add_argument("--refinement", type=int)
    _horizon_options(constants)

    laws = add(Subcommand.LAWS.value, "One-point and two-point laws")
    laws.add_argument("--law", choices=[k.value for k in LawKind])
    _mode_option(laws)
    laws.add_argument("--y", type=int, nargs="+", help="Second site of the two-point law")
    laws.add_argument("--truncation", type=int)
    laws.add_argument("--levels", type=int)
    laws.add_argument("--refinement", type=int)

    count = add(Subcommand.COUNT.value, "Exceedance count moments")
    _horizon_options(count)
    count.add_argument("--beta", type=float)
    count.add_argument("--u", type=float)

    tail = add(Subcommand.TAIL.value, "Upward and downward tails")
    _horizon_options(tail)
    _mode_option(tail)
    tail.add_argument("--dir", dest="direction", choices=[d.value for d in Direction])
    tail.add_argument("--beta", type=float)
    tail.add_argument("--u", type=float)
    tail.add_argument("--beta-prime", dest="beta_prime", type=float)

    gumbel = add(Subcommand.GUMBEL.value, "Gumbel fluctuations at beta=1")
    _horizon_options(gumbel)

    forcing = add(Subcommand.FORCING.value, "Forcing event B")
    _horizon_options(forcing)
    forcing.add_argument("--beta", type=float)
    forcing.add_argument("--eta", type=float)
    forcing.add_argument("--delta", type=float)
    forcing.add_argument("--kappa", type=float)

    segments = add(Subcommand.SEGMENTS.value, "Segment visit statistics")
    _horizon_options(segments)
    segments.add_argument("--beta", type=float)
    segments.add_argument("--beta1", type=float)
    segments.add_argument("--beta2", type=float)
    segments.add_argument("--kappa", type=float)

    add(Subcommand.CHECKPOINT_RESUME.value, "Continue an interrupted run from its checkpoint")
    return parser


def _file_values(path: str) -> Dict[str, Any]:
    values = {}
    for key, value in dotenv_values(path).items():
        if value is None or key == "subcommand":
            continue
        values[key] = split_list(value) if key in LIST_FIELDS else value
    return values


def _env_values() -> Dict[str, Any]:
    load_dotenv()
    values = {}
    if os.getenv(ENV_SEED):
        values["seed"] = os.getenv(ENV_SEED)
    if os.getenv(ENV_WORKERS):
        values["workers"] = os.getenv(ENV_WORKERS)
    return values


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    """Merge defaults, config file, environment and flags into one config."""
    flags = {k: v for k, v in vars(args).items() if k not in RUNTIME_KEYS}
    values: Dict[str, Any] = {}
    if getattr(args, "config", None):
        values.update(_file_values(args.config))
    values.update(_env_values())
    values.update(flags)
    if "y" not in values:
        d = int(values.get("d", 3))
        values["y"] = [1] + [0] * (d - 1)
    return ExperimentConfig(**values)


def validate_config(config: ExperimentConfig) -> ExperimentConfig:
    if config.subcommand == Subcommand.CHECKPOINT_RESUME:
        if config.checkpoint is None:
            raise ValueError("checkpoint-resume requires --checkpoint.")
        return config
    preprocessor = ConfigPreprocessor()
    config = preprocessor.run(config)
    if config.subcommand == Subcommand.FORCING:
        preprocessor.validate_eta(config, lattice_constants(config.d).gamma_alpha.gamma)
    return config


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(args, "log_level", "INFO").upper(), format=LOG_FORMAT)

    try:
        config = validate_config(build_config(args))
    except (ValidationError, ValueError) as error:
        parser.print_usage(sys.stderr)
        print(f"maxlocal: invalid config: {error}", file=sys.stderr)
        return 2

    lab = LocalTimeLab.open_or_create(config.output_dir)
    try:
        summary = lab.run(config, stop_at=getattr(args, "stop_at", None))
    except InvariantViolation as error:
        logger.error(str(error))
        return 1
    except ExperimentInterrupted as error:
        logger.warning(f"Interrupted; resume with: maxlocal checkpoint-resume "
                       f"--checkpoint {error.checkpoint_path}")
        return 130

    if summary.violations:
        logger.error(f"Invariants violated: {', '.join(summary.violations)}")
        return 1
    if summary.flags:
        logger.info(f"Flags: {', '.join(summary.flags)}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
