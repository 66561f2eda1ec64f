"""rapo-lab train subcommand."""

import argparse
from pathlib import Path
from typing import Any

from hotlog import get_logger

from rapo_lab.argparse import argparse_non_negative_int, argparse_override
from rapo_lab.cli.common import ManifestRecorder, handle_cli_exception, resolve_output_dir, setup_logging
from rapo_lab.config import DEFAULT_CONFIG_FILENAME, load_train_config
from rapo_lab.trainer import Trainer

from . import _shared

logger = get_logger(__name__)

VARIANTS = ('grpo', 'rapo_g', 'rapo_d')


def run_train(
    *,
    config_path: Path,
    overrides: list[tuple[str, Any]],
    flags: dict[str, Any],
    out: Path | None,
    resume: Path | None = None,
    verbose: int = 0,
) -> int:
    """Resolve the configuration, train, and record the run manifest."""
    setup_logging(verbose=verbose)
    out_dir = resolve_output_dir(out, 'train')
    recorder = ManifestRecorder('train', out_dir)
    try:
        config = load_train_config(config_path, overrides=overrides, flags=flags)
        recorder.start(config=config.model_dump(mode='json'), seed=config.seed)
        history = Trainer(config, out_dir, resume=resume).run()
    except Exception as exc:  # noqa: BLE001 - top-level CLI guard
        return recorder.finish(handle_cli_exception(exc))

    logger.info(
        'train_complete',
        steps=len(history),
        final_reward=round(history[-1].mean_reward, 4) if history else None,
        out=str(out_dir),
    )
    return recorder.finish(0)


def _handle(namespace: argparse.Namespace) -> int:
    flags = {
        'steps': namespace.steps,
        'seed': namespace.seed,
        'variant': namespace.variant,
        'lr': namespace.lr,
    }
    return run_train(
        config_path=Path(namespace.config).resolve(),
        overrides=namespace.overrides or [],
        flags=flags,
        out=namespace.out,
        resume=namespace.resume,
        verbose=_shared.resolve_verbose(namespace),
    )


def register(subparsers: argparse._SubParsersAction) -> None:
    """Register the train subcommand."""
    parent = _shared.build_common_parent()
    parser = subparsers.add_parser(
        'train',
        parents=[parent],
        help='Train the toy policy with GRPO, RAPO_G or RAPO_D',
    )
    parser.add_argument(
        '--config',
        default=DEFAULT_CONFIG_FILENAME,
        help='Path to the training configuration file (default: %(default)s)',
    )
    parser.add_argument(
        '--set',
        dest='overrides',
        action='append',
        type=argparse_override,
        metavar='KEY=VALUE',
        help='Override a configuration value; dotted keys reach nested sections',
    )
    parser.add_argument('--steps', type=argparse_non_negative_int, help='Number of training steps')
    _shared.seed_argument(parser)
    parser.add_argument('--variant', choices=VARIANTS, help='Objective variant')
    parser.add_argument('--lr', type=float, help='AdamW learning rate')
    parser.add_argument('--resume', type=Path, help='Continue from this checkpoint')
    _shared.output_argument(parser)
    parser.set_defaults(handler=_handle)
