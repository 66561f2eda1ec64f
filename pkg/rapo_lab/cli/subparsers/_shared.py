"""Shared helpers for rapo-lab subparsers."""

import argparse
from pathlib import Path

from hotlog import add_verbosity_argument, resolve_verbosity

from rapo_lab.argparse import argparse_non_negative_int, argparse_output_dir, argparse_positive_int


def build_common_parent() -> argparse.ArgumentParser:
    """Create a parent parser containing global verbosity options."""
    parent = argparse.ArgumentParser(add_help=False)
    add_verbosity_argument(parent)
    return parent


def resolve_verbose(namespace: argparse.Namespace) -> int:
    """Resolve verbosity level from parsed namespace."""
    return resolve_verbosity(namespace)


def output_argument(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        '--out',
        type=argparse_output_dir,
        help='Output directory (default: $RAPO_LAB_OUT/<subcommand> or ./rapo-runs/<subcommand>)',
    )


def seed_argument(parser: argparse.ArgumentParser, *, default: int | None = None) -> None:
    parser.add_argument(
        '--seed',
        type=argparse_non_negative_int,
        default=default,
        help='Root seed for every random stream' + (' (default: %(default)s)' if default is not None else ''),
    )


def checkpoint_arguments(parser: argparse.ArgumentParser) -> None:
    """Attach the checkpoint and instance-count options."""
    parser.add_argument(
        '--checkpoint',
        type=Path,
        required=True,
        help='Checkpoint written by rapo-lab train',
    )
    parser.add_argument(
        '--instances',
        type=argparse_positive_int,
        default=16,
        help='Number of fresh task instances (default: %(default)s)',
    )
