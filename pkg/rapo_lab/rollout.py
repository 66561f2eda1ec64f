"""Group rollouts against a frozen snapshot of the policy."""

from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from hotlog import get_logger
from scipy.special import entr, softmax

from rapo_lab.dist import PROB_FLOOR
from rapo_lab.models import TrajectoryRecord
from rapo_lab.objective import grpo_advantages
from rapo_lab.policy import PolicyParams, forward, sample_token
from rapo_lab.rng import KeyedStreams
from rapo_lab.task import TaskInstance, reward

logger = get_logger(__name__)


@dataclass
class Trajectory:
    """One sampled continuation with everything recorded at sampling time.

    ``dists[t - 1]`` is the vision-conditioned next-token law that produced
    ``tokens[t - 1]``; ``log_probs`` are the sampling-policy log-probs of
    the chosen tokens.
    """

    instance_id: int
    group_index: int
    prompt_tokens: np.ndarray
    tokens: np.ndarray
    dists: np.ndarray
    entropies: np.ndarray
    log_probs: np.ndarray
    truncated: bool = False
    reward: float = 0.0
    masked_reference: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def length(self) -> int:
        return int(self.tokens.size)

    @property
    def sequence(self) -> np.ndarray:
        return np.concatenate([self.prompt_tokens, self.tokens])

    @property
    def model_input(self) -> np.ndarray:
        """Tokens fed to the policy so every generated token has an emit position."""
        return self.sequence[:-1]

    def to_record(self, gold: int) -> TrajectoryRecord:
        return TrajectoryRecord(
            instance_id=self.instance_id,
            group_index=self.group_index,
            gold=gold,
            tokens=[int(token) for token in self.sequence],
            reward=self.reward,
            entropies=[float(c) for c in self.entropies],
            truncated=self.truncated,
        )


@dataclass
class RolloutGroup:
    instance: TaskInstance
    trajectories: list[Trajectory]
    rewards: np.ndarray
    advantages: np.ndarray
    degenerate: bool

    @classmethod
    def build(cls, instance: TaskInstance, trajectories: list[Trajectory]) -> 'RolloutGroup':
        rewards = np.array([trajectory.reward for trajectory in trajectories])
        advantages, degenerate = grpo_advantages(rewards)
        return cls(instance, trajectories, rewards, advantages, degenerate)

    @property
    def size(self) -> int:
        return len(self.trajectories)

    @property
    def mixed(self) -> bool:
        """Neither all-correct nor all-wrong."""
        correct = int(np.sum(self.rewards > 0.0))
        return 0 < correct < self.size


def sampling_law(logits: np.ndarray, temperature: float) -> np.ndarray:
    """Row-wise softmax of ``logits / temperature``, floored at PROB_FLOOR and renormalised."""
    if temperature <= 0.0:
        msg = f'temperature must be positive, got {temperature}'
        raise ValueError(msg)
    probs = softmax(np.asarray(logits, dtype=np.float64) / temperature, axis=-1)
    probs[probs < PROB_FLOOR] = 0.0
    return probs / probs.sum(axis=-1, keepdims=True)


def rollout_groups(
    params: PolicyParams,
    instances: Sequence[TaskInstance],
    group_size: int,
    temperature: float,
    streams: KeyedStreams,
    step: int,
    *,
    greedy: bool = False,
) -> list[RolloutGroup]:
    """Sample ``group_size`` trajectories per instance in lock step.

    Every trajectory draws from its own stream keyed by
    (step, instance id, group index), so results do not depend on how
    instances are batched or ordered.
    """
    if group_size < 2:
        msg = f'group size must be at least 2, got {group_size}'
        raise ValueError(msg)
    if not instances:
        return []
    horizons = {instance.horizon for instance in instances}
    prompts = {instance.prompt_tokens.size for instance in instances}
    if len(horizons) != 1 or len(prompts) != 1:
        msg = 'instances in one rollout batch must share prompt length and horizon'
        raise ValueError(msg)
    horizon, prompt_length = horizons.pop(), prompts.pop()
    max_len = params.config.max_len
    steps = min(horizon, max_len - prompt_length + 1)
    truncated = steps < horizon

    rows = [(instance, g) for instance in instances for g in range(group_size)]
    rngs = [streams.stream('rollout', step, instance.instance_id, g) for instance, g in rows]
    sequences = np.stack([instance.prompt_tokens for instance, _ in rows])
    vocab = params.config.vocab
    dists = np.zeros((len(rows), steps, vocab))
    chosen = np.zeros((len(rows), steps), dtype=np.int64)

    for t in range(steps):
        result = forward(params, sequences)
        probs = sampling_law(result.logits[:, -1, :], temperature)
        dists[:, t] = probs
        for row, rng in enumerate(rngs):
            chosen[row, t] = sample_token(probs[row], rng, greedy=greedy)
        sequences = np.concatenate([sequences, chosen[:, t : t + 1]], axis=1)

    entropies = entr(dists).sum(axis=-1)
    # sampled tokens always carry mass above the floor
    log_probs = np.log(np.take_along_axis(dists, chosen[..., None], axis=-1)[..., 0])

    groups: list[RolloutGroup] = []
    for start in range(0, len(rows), group_size):
        instance = rows[start][0]
        trajectories = []
        for row in range(start, start + group_size):
            trajectory = Trajectory(
                instance_id=instance.instance_id,
                group_index=rows[row][1],
                prompt_tokens=instance.prompt_tokens,
                tokens=chosen[row].copy(),
                dists=dists[row].copy(),
                entropies=entropies[row].copy(),
                log_probs=log_probs[row].copy(),
                truncated=truncated,
            )
            trajectory.reward = reward(instance, trajectory)
            trajectories.append(trajectory)
        groups.append(RolloutGroup.build(instance, trajectories))
    if truncated:
        logger.warning('rollout_truncated', horizon=horizon, generated=steps, max_len=max_len)
    return groups


def rollout_group(
    params: PolicyParams,
    instance: TaskInstance,
    group_size: int,
    temperature: float,
    streams: KeyedStreams,
    step: int = 0,
    *,
    greedy: bool = False,
) -> RolloutGroup:
    return rollout_groups(params, [instance], group_size, temperature, streams, step, greedy=greedy)[0]


def dump_trajectories(groups: Sequence[RolloutGroup], path: Path) -> int:
    """Write one TrajectoryRecord line per trajectory; returns the count."""
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open('w') as fh:
        for group in groups:
            for trajectory in group.trajectories:
                fh.write(trajectory.to_record(group.instance.gold).model_dump_json() + '\n')
                count += 1
    logger.info('trajectories_dumped', path=str(path), count=count)
    return count


__all__ = ['RolloutGroup', 'Trajectory', 'dump_trajectories', 'rollout_group', 'rollout_groups', 'sampling_law']
