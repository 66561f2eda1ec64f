"""rapo-lab rollout subcommand."""

import argparse
from pathlib import Path

from hotlog import get_logger

from rapo_lab.checkpoint import load_checkpoint
from rapo_lab.cli.common import ManifestRecorder, handle_cli_exception, resolve_output_dir, setup_logging
from rapo_lab.rng import KeyedStreams
from rapo_lab.rollout import dump_trajectories, rollout_groups
from rapo_lab.task import make_task_instance

from . import _shared

logger = get_logger(__name__)

TRAJECTORIES_FILENAME = 'trajectories.jsonl'


def run_rollout(
    *,
    checkpoint: Path,
    instances: int,
    greedy: bool,
    seed: int,
    out: Path | None,
    verbose: int = 0,
) -> int:
    """Sample fresh instances from a checkpoint and dump every trajectory."""
    setup_logging(verbose=verbose)
    out_dir = resolve_output_dir(out, 'rollout')
    recorder = ManifestRecorder('rollout', out_dir)
    try:
        ckpt = load_checkpoint(checkpoint)
        config = ckpt.config
        recorder.start(config=config.model_dump(mode='json'), seed=seed)
        streams = KeyedStreams(seed)
        tasks = [make_task_instance(streams.stream('task', 0, index), config.task, index) for index in range(instances)]
        groups = rollout_groups(ckpt.params, tasks, config.group_size, config.temperature, streams, 0, greedy=greedy)
        count = dump_trajectories(groups, out_dir / TRAJECTORIES_FILENAME)
    except Exception as exc:  # noqa: BLE001 - top-level CLI guard
        return recorder.finish(handle_cli_exception(exc))

    rewards = [trajectory.reward for group in groups for trajectory in group.trajectories]
    logger.info('rollout_complete', trajectories=count, accuracy=round(sum(rewards) / max(len(rewards), 1), 4))
    return recorder.finish(0)


def _handle(namespace: argparse.Namespace) -> int:
    return run_rollout(
        checkpoint=namespace.checkpoint,
        instances=namespace.instances,
        greedy=namespace.greedy,
        seed=namespace.seed,
        out=namespace.out,
        verbose=_shared.resolve_verbose(namespace),
    )


def register(subparsers: argparse._SubParsersAction) -> None:
    """Register the rollout subcommand."""
    parent = _shared.build_common_parent()
    parser = subparsers.add_parser(
        'rollout',
        parents=[parent],
        help='Dump raw trajectories sampled from a checkpoint',
    )
    _shared.checkpoint_arguments(parser)
    parser.add_argument(
        '--greedy',
        action='store_true',
        help='Decode greedily instead of sampling',
    )
    _shared.seed_argument(parser, default=0)
    _shared.output_argument(parser)
    parser.set_defaults(handler=_handle)
