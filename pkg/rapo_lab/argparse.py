import argparse
from pathlib import Path
from typing import Any

from rapo_lab.config import RapoConfigError, parse_override
from rapo_lab.diagnostics import MEASURES


def argparse_override(value: str) -> tuple[str, Any]:
    """Argparse type for ``--set key=value`` overrides."""
    try:
        return parse_override(value)
    except RapoConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def argparse_non_negative_int(value: str) -> int:
    try:
        number = int(value)
    except ValueError as exc:
        msg = f'expected an integer, got "{value}"'
        raise argparse.ArgumentTypeError(msg) from exc
    if number < 0:
        msg = f'expected a non-negative integer, got {number}'
        raise argparse.ArgumentTypeError(msg)
    return number


def argparse_positive_int(value: str) -> int:
    number = argparse_non_negative_int(value)
    if number == 0:
        msg = 'expected a positive integer, got 0'
        raise argparse.ArgumentTypeError(msg)
    return number


def argparse_measure(value: str) -> str:
    """Argparse type for diagnostic measure names."""
    if value not in MEASURES:
        msg = f'unknown measure "{value}" (choose from {", ".join(MEASURES)})'
        raise argparse.ArgumentTypeError(msg)
    return value


def argparse_output_dir(value: str) -> Path:
    """Verify that an output directory argument is not an existing file.

    Args:
        value: Directory string from CLI

    Returns:
        The directory as a Path
    """
    path = Path(value)
    if path.exists() and not path.is_dir():
        msg = f'output directory exists and is not a directory: {value}'
        raise argparse.ArgumentTypeError(msg)
    return path
