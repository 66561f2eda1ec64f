"""rapo-lab verify-theory subcommand."""

import argparse
import os
from pathlib import Path

from hotlog import get_logger

from rapo_lab.argparse import argparse_non_negative_int, argparse_positive_int
from rapo_lab.cli.common import (
    EXIT_FAILURE,
    EXIT_OK,
    ManifestRecorder,
    handle_cli_exception,
    resolve_output_dir,
    setup_logging,
)
from rapo_lab.config import build_sweep_config
from rapo_lab.verification import REPORT_FILENAME, run_sweep

from . import _shared

logger = get_logger(__name__)


def run_verify(
    *,
    settings: dict[str, int | None],
    out: Path | None,
    verbose: int = 0,
) -> int:
    """Run the theory sweep; exit 1 iff any inequality is violated."""
    setup_logging(verbose=verbose)
    out_dir = resolve_output_dir(out, 'verify-theory')
    recorder = ManifestRecorder('verify-theory', out_dir)
    try:
        config = build_sweep_config(settings)
        recorder.start(config=config.model_dump(mode='json'), seed=config.base_seed)
        summary = run_sweep(config, out_dir / REPORT_FILENAME)
    except Exception as exc:  # noqa: BLE001 - top-level CLI guard
        return recorder.finish(handle_cli_exception(exc))

    for record in summary.violations:
        logger.error(
            'inequality_violated',
            seed=record.seed,
            inequality=record.inequality,
            lhs=record.lhs,
            rhs=record.rhs,
            _verbose_detail=record.detail,
        )
    logger.info(
        'verify_theory_complete',
        records=len(summary.records),
        violations=len(summary.violations),
        skipped=summary.skipped,
        report=str(out_dir / REPORT_FILENAME),
    )
    return recorder.finish(EXIT_OK if summary.ok else EXIT_FAILURE)


def _handle(namespace: argparse.Namespace) -> int:
    settings = {
        'seeds': namespace.seeds,
        'base_seed': namespace.seed,
        'max_vocab': namespace.max_vocab,
        'max_horizon': namespace.max_horizon,
        'max_visual': namespace.max_visual,
        'workers': namespace.workers,
    }
    return run_verify(settings=settings, out=namespace.out, verbose=_shared.resolve_verbose(namespace))


def register(subparsers: argparse._SubParsersAction) -> None:
    """Register the verify-theory subcommand."""
    parent = _shared.build_common_parent()
    parser = subparsers.add_parser(
        'verify-theory',
        parents=[parent],
        help='Brute-force the gain identities and bounds on random tiny worlds',
    )
    parser.add_argument(
        '--seeds',
        type=argparse_non_negative_int,
        default=200,
        help='Number of random instances (default: %(default)s)',
    )
    parser.add_argument('--max-vocab', type=argparse_positive_int, default=6, help='Vocabulary cap (default: 6)')
    parser.add_argument('--max-horizon', type=argparse_positive_int, default=3, help='Horizon cap (default: 3)')
    parser.add_argument('--max-visual', type=argparse_positive_int, default=4, help='Visual-input cap (default: 4)')
    parser.add_argument(
        '--workers',
        type=argparse_positive_int,
        default=os.cpu_count() or 1,
        help='Worker processes; results do not depend on it (default: %(default)s)',
    )
    _shared.seed_argument(parser, default=0)
    _shared.output_argument(parser)
    parser.set_defaults(handler=_handle)
