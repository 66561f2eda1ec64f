"""rapo-lab diagnose subcommand."""

import argparse
from pathlib import Path

from hotlog import get_logger

from rapo_lab.argparse import argparse_measure
from rapo_lab.checkpoint import load_checkpoint
from rapo_lab.cli.common import ManifestRecorder, handle_cli_exception, resolve_output_dir, setup_logging
from rapo_lab.diagnostics import MEASURES, Measure, run_diagnostics

from . import _shared

logger = get_logger(__name__)


def run_diagnose(
    *,
    checkpoint: Path,
    measures: list[Measure],
    instances: int,
    seed: int,
    out: Path | None,
    verbose: int = 0,
) -> int:
    setup_logging(verbose=verbose)
    out_dir = resolve_output_dir(out, 'diagnose')
    recorder = ManifestRecorder('diagnose', out_dir)
    try:
        ckpt = load_checkpoint(checkpoint)
        recorder.start(config=ckpt.config.model_dump(mode='json'), seed=seed)
        written = run_diagnostics(ckpt, measures, out_dir, instances=instances, seed=seed)
    except Exception as exc:  # noqa: BLE001 - top-level CLI guard
        return recorder.finish(handle_cli_exception(exc))

    logger.info('diagnose_complete', checkpoint_step=ckpt.step, outputs=sorted(written))
    return recorder.finish(0)


def _handle(namespace: argparse.Namespace) -> int:
    return run_diagnose(
        checkpoint=namespace.checkpoint,
        measures=namespace.measures,
        instances=namespace.instances,
        seed=namespace.seed,
        out=namespace.out,
        verbose=_shared.resolve_verbose(namespace),
    )


def register(subparsers: argparse._SubParsersAction) -> None:
    """Register the diagnose subcommand."""
    parent = _shared.build_common_parent()
    parser = subparsers.add_parser(
        'diagnose',
        parents=[parent],
        help='Measure visual dependence of a trained policy',
    )
    _shared.checkpoint_arguments(parser)
    parser.add_argument(
        '--measure',
        dest='measures',
        nargs='+',
        required=True,
        type=argparse_measure,
        metavar='MEASURE',
        help=f'Measurements to run: {", ".join(MEASURES)}',
    )
    _shared.seed_argument(parser, default=0)
    _shared.output_argument(parser)
    parser.set_defaults(handler=_handle)
