"""Subparser registrations for the rapo-lab CLI."""

import argparse

from . import diagnose, rollout, train, verify_theory


def register_all(subparsers: argparse._SubParsersAction) -> None:
    """Register all rapo-lab subcommands."""
    train.register(subparsers)
    verify_theory.register(subparsers)
    diagnose.register(subparsers)
    rollout.register(subparsers)
