"""Training loop: rollout, anchor plans, frozen references, objective, AdamW."""

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from hotlog import get_logger
from hotlog.live import LiveLogger, maybe_live_logging

from rapo_lab.anchors import plan_anchors
from rapo_lab.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from rapo_lab.config import RapoConfigError
from rapo_lab.errors import NonFiniteLoss
from rapo_lab.models import StepMetrics, TimingRecord, TrainConfig
from rapo_lab.objective import OBJECTIVES, TrainingBatch, freeze_references
from rapo_lab.optim import AdamW, vision_freeze_mask
from rapo_lab.policy import PolicyParams
from rapo_lab.rng import KeyedStreams
from rapo_lab.rollout import RolloutGroup, rollout_groups
from rapo_lab.task import SequenceLayout, TaskInstance, make_task_instance

logger = get_logger(__name__)

METRICS_FILENAME = 'metrics.jsonl'
TIMINGS_FILENAME = 'timings.jsonl'
CHECKPOINT_DIRNAME = 'checkpoints'


@dataclass
class TrainState:
    """Mutable training state; ``step`` counts completed steps."""

    config: TrainConfig
    params: PolicyParams
    reference: PolicyParams
    optimizer: AdamW
    streams: KeyedStreams
    step: int = 0

    @classmethod
    def initial(cls, config: TrainConfig) -> 'TrainState':
        streams = KeyedStreams(config.seed)
        params = PolicyParams.init(config.policy, streams.stream('init'))
        return cls(
            config=config,
            params=params,
            reference=params.copy(),
            optimizer=_optimizer(config, params),
            streams=streams,
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> 'TrainState':
        optimizer = _optimizer(ckpt.config, ckpt.params)
        optimizer.m = ckpt.adam_m.copy()
        optimizer.v = ckpt.adam_v.copy()
        optimizer.step_count = ckpt.adam_steps
        return cls(
            config=ckpt.config,
            params=ckpt.params.copy(),
            reference=ckpt.reference.copy(),
            optimizer=optimizer,
            streams=KeyedStreams(ckpt.seed),
            step=ckpt.step,
        )

    def to_checkpoint(self) -> Checkpoint:
        adam_m, adam_v = self.optimizer.moments(self.params)
        return Checkpoint(
            config=self.config,
            step=self.step,
            seed=self.streams.seed,
            params=self.params,
            adam_m=adam_m,
            adam_v=adam_v,
            reference=self.reference,
            adam_steps=self.optimizer.step_count,
        )

    @property
    def layout(self) -> SequenceLayout:
        return SequenceLayout.from_config(self.config.task)


def _optimizer(config: TrainConfig, params: PolicyParams) -> AdamW:
    trainable = {}
    if config.policy.freeze_vision_embeddings:
        trainable = vision_freeze_mask(params, config.task.vision_token_ids)
    optimizer = AdamW(lr=config.lr, weight_decay=config.weight_decay, trainable=trainable)
    optimizer.init_state(params)
    return optimizer


def draw_instances(state: TrainState, start: int, count: int) -> list[TaskInstance]:
    """Task instances ``start .. start + count - 1`` of the current step."""
    return [
        make_task_instance(state.streams.stream('task', state.step, index), state.config.task, index)
        for index in range(start, start + count)
    ]


def _dynamic_sampling(
    state: TrainState,
    groups: list[RolloutGroup],
    next_id: int,
) -> tuple[list[RolloutGroup], int]:
    """Keep mixed-correctness groups, drawing extra prompts while short."""
    config = state.config
    kept = [group for group in groups if group.mixed]
    filtered = len(groups) - len(kept)
    for _ in range(config.dynamic_sampling_rounds):
        if len(kept) >= config.prompts_per_step:
            break
        extra = draw_instances(state, next_id, config.prompts_per_step)
        next_id += len(extra)
        fresh = rollout_groups(
            state.params, extra, config.group_size, config.temperature, state.streams, state.step
        )
        kept.extend(group for group in fresh if group.mixed)
        filtered += sum(not group.mixed for group in fresh)
    return kept[: config.prompts_per_step], filtered


def train_step(state: TrainState, instances: list[TaskInstance]) -> tuple[TrainState, StepMetrics]:
    """One rollout-and-update step; ``state.step`` advances by one."""
    config = state.config
    layout = state.layout
    groups = rollout_groups(
        state.params, instances, config.group_size, config.temperature, state.streams, state.step
    )
    trajectories = [trajectory for group in groups for trajectory in group.trajectories]
    mean_reward = float(np.mean([trajectory.reward for trajectory in trajectories]))
    mean_entropy = float(np.mean([trajectory.entropies.mean() for trajectory in trajectories]))
    degenerate = sum(group.degenerate for group in groups)

    filtered = 0
    if config.variant == 'rapo_d':
        groups, filtered = _dynamic_sampling(state, groups, next_id=len(instances))

    metrics = StepMetrics(
        step=state.step,
        variant=config.variant,
        mean_reward=mean_reward,
        mean_anchor_kl=0.0,
        mean_entropy=mean_entropy,
        clip_fraction=0.0,
        grad_norm=0.0,
        objective=0.0,
        n_anchors=0,
        degenerate_groups=degenerate,
        filtered_groups=filtered,
        skipped=True,
    )
    if not groups:
        logger.warning('update_skipped', step=state.step, reason='no mixed-correctness groups', filtered=filtered)
        state.step += 1
        return state, metrics

    plans = [
        [
            plan_anchors(
                trajectory.entropies,
                config,
                layout,
                rng=state.streams.stream('anchors', state.step, trajectory.instance_id, trajectory.group_index),
            )
            for trajectory in group.trajectories
        ]
        for group in groups
    ]
    batch = TrainingBatch(groups, plans)
    refs = freeze_references(state.params, state.reference, batch, temperature=config.temperature)
    result = OBJECTIVES[config.variant](state.params, batch, refs, config)

    descent = result.grad.zeros_like()
    for name, grad in result.grad.items():
        descent.tensors[name] = -grad
    updated = state.optimizer.step(state.params, descent)
    if not updated.all_finite():
        msg = f'parameters became non-finite at step {state.step}'
        raise NonFiniteLoss(msg)
    state.params = updated

    metrics = metrics.model_copy(
        update={
            'mean_anchor_kl': result.stats.mean_anchor_kl,
            'clip_fraction': result.stats.clip_fraction,
            'grad_norm': result.grad.global_norm(),
            'objective': result.value,
            'n_anchors': result.stats.n_anchors,
            'skipped': False,
        }
    )
    state.step += 1
    return state, metrics


def checkpoint_path(out_dir: Path, step: int) -> Path:
    return out_dir / CHECKPOINT_DIRNAME / f'step-{step:06d}.ckpt'


def _comparable(config: TrainConfig) -> TrainConfig:
    return config.model_copy(update={'steps': 0, 'checkpoint_every': 0})


class Trainer:
    """Runs ``config.steps`` training steps and writes the run's records.

    ``metrics.jsonl`` holds one StepMetrics line per step and depends only
    on the config; wall-clock time goes to ``timings.jsonl``.
    """

    def __init__(self, config: TrainConfig, out_dir: Path, *, resume: Path | None = None) -> None:
        self.config = config
        self.out_dir = out_dir
        if resume is None:
            self.state = TrainState.initial(config)
        else:
            ckpt = load_checkpoint(resume)
            if _comparable(ckpt.config).digest() != _comparable(config).digest():
                msg = f'checkpoint {resume} was written with a different training configuration'
                raise RapoConfigError(msg)
            self.state = TrainState.from_checkpoint(ckpt)
            self.state.config = config
            logger.info('training_resumed', checkpoint=str(resume), step=ckpt.step)

    @property
    def metrics_path(self) -> Path:
        return self.out_dir / METRICS_FILENAME

    @property
    def timings_path(self) -> Path:
        return self.out_dir / TIMINGS_FILENAME

    def _prepare_streams(self) -> None:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        start = self.state.step
        for path in (self.metrics_path, self.timings_path):
            kept = []
            if start and path.exists():
                kept = [line for line in path.read_text().splitlines() if _line_step(line) < start]
            path.write_text(''.join(line + '\n' for line in kept))

    def run(self) -> list[StepMetrics]:
        config = self.config
        self._prepare_streams()
        history: list[StepMetrics] = []
        logger.info(
            'train_phase_start',
            variant=config.variant,
            steps=config.steps,
            start=self.state.step,
            _verbose_parameters=self.state.params.num_parameters,
        )
        with maybe_live_logging('Training...') as live:
            while self.state.step < config.steps:
                metrics = self._run_step(live)
                history.append(metrics)
                step = self.state.step
                if config.checkpoint_every and step % config.checkpoint_every == 0:
                    save_checkpoint(self.state.to_checkpoint(), checkpoint_path(self.out_dir, step))
        final = checkpoint_path(self.out_dir, self.state.step)
        if not final.exists():
            save_checkpoint(self.state.to_checkpoint(), final)
        logger.info('train_phase_complete', steps=self.state.step, checkpoint=str(final))
        return history

    def _run_step(self, live: LiveLogger | None) -> StepMetrics:
        started = time.perf_counter()
        instances = draw_instances(self.state, 0, self.config.prompts_per_step)
        self.state, metrics = train_step(self.state, instances)
        wall_ms = (time.perf_counter() - started) * 1000.0
        with self.metrics_path.open('a') as fh:
            fh.write(metrics.model_dump_json() + '\n')
        with self.timings_path.open('a') as fh:
            fh.write(TimingRecord(step=metrics.step, wall_ms=wall_ms).model_dump_json() + '\n')
        fields = {
            'step': metrics.step,
            'mean_reward': round(metrics.mean_reward, 4),
            'mean_anchor_kl': round(metrics.mean_anchor_kl, 6),
        }
        if live is not None:
            live.info('train_step_complete', **fields)
        else:
            logger.info('train_step_complete', **fields, _display_level=1)
        return metrics


def _line_step(line: str) -> int:
    return int(json.loads(line)['step'])


__all__ = [
    'CHECKPOINT_DIRNAME',
    'METRICS_FILENAME',
    'TIMINGS_FILENAME',
    'TrainState',
    'Trainer',
    'checkpoint_path',
    'draw_instances',
    'train_step',
]
