"""Policy objectives: GRPO, RAPO_G and the dynamic-sampling RAPO_D.

Every objective is evaluated on one unmasked forward pass. What the
gradient must not flow through (sampling log-probs, the chain-masked
branch, reference-policy log-probs and the branching-room weights) is
computed beforehand by :func:`freeze_references` and enters as constants.

Values returned here are J, to be ascended; the trainer descends -J.
"""

import math
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING

import numpy as np
from scipy.special import log_softmax, softmax

from rapo_lab.dist import ProbabilityVector, kl
from rapo_lab.errors import EmptyBatch
from rapo_lab.models import TrainConfig, Variant
from rapo_lab.policy import ForwardResult, PolicyParams, forward, value_and_grad

if TYPE_CHECKING:
    from rapo_lab.anchors import AnchorPlan
    from rapo_lab.rollout import RolloutGroup, Trajectory

ADVANTAGE_STD_FLOOR = 1e-12


def grpo_advantages(rewards: Sequence[float] | np.ndarray) -> tuple[np.ndarray, bool]:
    """(R - mean) / std with the population std; std = 0 gives zeros and flags the group."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size < 2:
        msg = f'a group needs at least 2 rewards, got {rewards.size}'
        raise ValueError(msg)
    std = float(rewards.std())
    if std <= ADVANTAGE_STD_FLOOR:
        return np.zeros_like(rewards), True
    return (rewards - rewards.mean()) / std, False


@dataclass
class TrainingBatch:
    """Rollout groups with one anchor plan per trajectory."""

    groups: list['RolloutGroup']
    plans: list[list['AnchorPlan']]

    def trajectories(self) -> list['Trajectory']:
        return [trajectory for group in self.groups for trajectory in group.trajectories]

    def flat_plans(self) -> list['AnchorPlan']:
        return [plan for plans in self.plans for plan in plans]

    def inputs(self) -> np.ndarray:
        rows = [trajectory.model_input for trajectory in self.trajectories()]
        if len({row.size for row in rows}) > 1:
            msg = 'trajectories in one batch must share a length'
            raise ValueError(msg)
        return np.stack(rows)

    def subset(self, keep: Sequence[int]) -> 'TrainingBatch':
        return TrainingBatch([self.groups[i] for i in keep], [self.plans[i] for i in keep])


@dataclass(frozen=True)
class TrajectoryReferences:
    """Constants of differentiation for one trajectory."""

    old_log_probs: np.ndarray
    ref_log_probs: np.ndarray
    masked_log_probs: tuple[np.ndarray, ...]
    omegas: tuple[float, ...]


@dataclass(frozen=True)
class FrozenReferences:
    trajectories: tuple[TrajectoryReferences, ...]


def _emit_positions(trajectory: 'Trajectory') -> np.ndarray:
    prompt = trajectory.prompt_tokens.size
    return prompt + np.arange(trajectory.length) - 1


def freeze_references(
    params: PolicyParams,
    reference_params: PolicyParams,
    batch: TrainingBatch,
    *,
    temperature: float = 1.0,
) -> FrozenReferences:
    """Evaluate every stop-gradient quantity of the batch once.

    The masked branch uses the current ``params`` under each anchor's own
    chain mask; overlapping windows are evaluated independently.
    """
    trajectories = batch.trajectories()
    plans = batch.flat_plans()
    inputs = batch.inputs()
    ref_logits = forward(reference_params, inputs).logits

    masked_rows = [(i, k) for i, plan in enumerate(plans) for k in range(len(plan))]
    masked: list[list[np.ndarray]] = [[] for _ in trajectories]
    if masked_rows:
        masked_inputs = np.stack([inputs[i] for i, _ in masked_rows])
        masks = [plans[i].masks[k] for i, k in masked_rows]
        masked_logits = forward(params, masked_inputs, mask=masks).logits
        for row, (i, k) in enumerate(masked_rows):
            window = list(plans[i].window_positions(k))
            masked[i].append(log_softmax(masked_logits[row, window], axis=-1))

    refs = []
    for i, trajectory in enumerate(trajectories):
        positions = _emit_positions(trajectory)
        ref_rows = log_softmax(ref_logits[i, positions] / temperature, axis=-1)
        refs.append(
            TrajectoryReferences(
                old_log_probs=trajectory.log_probs.copy(),
                ref_log_probs=ref_rows[np.arange(trajectory.length), trajectory.tokens],
                masked_log_probs=tuple(masked[i]),
                omegas=plans[i].omegas,
            )
        )
        trajectory.masked_reference = {plans[i].steps[k]: np.exp(rows) for k, rows in enumerate(masked[i])}
    return FrozenReferences(tuple(refs))


@dataclass(frozen=True)
class ObjectiveStats:
    clip_fraction: float
    mean_anchor_kl: float
    n_anchors: int
    n_tokens: int
    degenerate_groups: int
    filtered_groups: int = 0


@dataclass(frozen=True)
class ObjectiveResult:
    """J, its gradient with respect to the policy, and bookkeeping."""

    value: float
    grad: PolicyParams
    stats: ObjectiveStats


@dataclass
class _Accumulator:
    dlogits: np.ndarray
    value: float = 0.0
    clipped: int = 0
    surrogate_tokens: int = 0
    anchor_kls: list[float] = field(default_factory=list)


def _surrogate(
    log_probs: np.ndarray,
    old: np.ndarray,
    advantage: float,
    clip_low: float,
    clip_high: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Clipped surrogate per token, its derivative in log-prob, and the clip flags."""
    ratio = np.exp(log_probs - old)
    unclipped = ratio * advantage
    clipped = np.clip(ratio, 1.0 - clip_low, 1.0 + clip_high) * advantage
    active = clipped < unclipped
    value = np.where(active, clipped, unclipped)
    return value, np.where(active, 0.0, unclipped), active


def _k3(log_probs: np.ndarray, ref: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """k3 estimate of KL(pi || pi_ref) per token and its derivative in log-prob."""
    diff = ref - log_probs
    ratio = np.exp(diff)
    return ratio - diff - 1.0, 1.0 - ratio


def _window_kl(logits: np.ndarray, masked_log_probs: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over the window of KL(softmax(logits) || masked) and its logit gradient."""
    log_p = log_softmax(logits, axis=-1)
    p = np.exp(log_p)
    gap = log_p - masked_log_probs
    per_position = np.sum(p * gap, axis=-1)
    grad = p * (gap - per_position[:, None]) / len(per_position)
    return float(per_position.mean()), grad


def _add_token_terms(
    acc: _Accumulator,
    logits: np.ndarray,
    positions: np.ndarray,
    trajectory: 'Trajectory',
    refs: TrajectoryReferences,
    steps: np.ndarray,
    *,
    advantage: float,
    scale: float,
    clip_low: float,
    clip_high: float,
    beta: float,
    temperature: float = 1.0,
) -> None:
    """Add scale * sum over ``steps`` of (clipped surrogate - beta * k3).

    Token log-probs are those of the sampling law softmax(logits / temperature).
    """
    index = steps - 1
    rows = positions[index]
    tokens = trajectory.tokens[index]
    log_p = log_softmax(logits[rows] / temperature, axis=-1)
    chosen = log_p[np.arange(index.size), tokens]

    value, d_value, active = _surrogate(chosen, refs.old_log_probs[index], advantage, clip_low, clip_high)
    coefficient = d_value
    total = value
    if beta:
        k3, d_k3 = _k3(chosen, refs.ref_log_probs[index])
        total = total - beta * k3
        coefficient = coefficient - beta * d_k3

    acc.value += scale * float(total.sum())
    acc.clipped += int(active.sum())
    acc.surrogate_tokens += int(index.size)
    # d log p[y] / d logits = (onehot(y) - p) / temperature
    grad = -np.exp(log_p) * coefficient[:, None]
    grad[np.arange(index.size), tokens] += coefficient
    np.add.at(acc.dlogits, rows, scale / temperature * grad)


def _add_anchor_terms(
    acc: _Accumulator,
    logits: np.ndarray,
    plan: 'AnchorPlan',
    refs: TrajectoryReferences,
    *,
    scale: float,
    gamma: float,
    sqrt_delta: float | None,
) -> None:
    """Add scale * sum over anchors of gamma * omega * f(window KL).

    f is sqrt(D + delta) - sqrt(delta) when ``sqrt_delta`` is given, else D.
    """
    for k in range(len(plan)):
        window = list(plan.window_positions(k))
        value, grad = _window_kl(logits[window], refs.masked_log_probs[k])
        acc.anchor_kls.append(value)
        weight = gamma * refs.omegas[k]
        if weight == 0.0:
            continue
        if sqrt_delta is None:
            acc.value += scale * weight * value
            acc.dlogits[window] += scale * weight * grad
        else:
            root = math.sqrt(value + sqrt_delta)
            acc.value += scale * weight * (root - math.sqrt(sqrt_delta))
            acc.dlogits[window] += scale * weight / (2.0 * root) * grad


def _evaluate(
    variant: Variant,
    params: PolicyParams,
    batch: TrainingBatch,
    refs: FrozenReferences,
    config: TrainConfig,
) -> ObjectiveResult:
    clip_low = config.clip_low
    clip_high = config.effective_clip_high
    captured: list[ObjectiveStats] = []

    def loss_fn(result: ForwardResult) -> tuple[float, np.ndarray]:
        acc = _Accumulator(dlogits=np.zeros_like(result.logits))
        n_groups = len(batch.groups)
        row = 0
        n_anchors = 0
        n_tokens = 0
        for group, plans in zip(batch.groups, batch.plans, strict=True):
            token_sets = []
            for trajectory, plan in zip(group.trajectories, plans, strict=True):
                everything = np.arange(1, trajectory.length + 1)
                use_anchors = variant != 'grpo' and not plan.empty
                token_sets.append(np.array(plan.steps) if use_anchors else everything)
            group_tokens = sum(steps.size for steps in token_sets)

            for i, (trajectory, plan) in enumerate(zip(group.trajectories, plans, strict=True)):
                logits = result.logits[row]
                terms = _Accumulator(dlogits=acc.dlogits[row])
                steps = token_sets[i]
                if variant == 'rapo_d':
                    scale = 1.0 / (n_groups * group_tokens)
                else:
                    scale = 1.0 / (n_groups * group.size * steps.size)
                _add_token_terms(
                    terms,
                    logits,
                    _emit_positions(trajectory),
                    trajectory,
                    refs.trajectories[row],
                    steps,
                    advantage=float(group.advantages[i]),
                    scale=scale,
                    clip_low=clip_low,
                    clip_high=clip_high,
                    beta=0.0 if variant == 'rapo_d' else config.beta,
                    temperature=config.temperature,
                )
                if plan.steps:
                    gamma = config.gamma if variant != 'grpo' else 0.0
                    sqrt_delta = config.sqrt_delta if variant == 'rapo_g' else None
                    _add_anchor_terms(
                        terms,
                        logits,
                        plan,
                        refs.trajectories[row],
                        scale=scale,
                        gamma=gamma,
                        sqrt_delta=sqrt_delta,
                    )
                acc.value += terms.value
                acc.clipped += terms.clipped
                acc.surrogate_tokens += terms.surrogate_tokens
                acc.anchor_kls.extend(terms.anchor_kls)
                n_anchors += len(plan)
                n_tokens += trajectory.length
                row += 1

        captured.append(
            ObjectiveStats(
                clip_fraction=acc.clipped / acc.surrogate_tokens if acc.surrogate_tokens else 0.0,
                mean_anchor_kl=float(np.mean(acc.anchor_kls)) if acc.anchor_kls else 0.0,
                n_anchors=n_anchors,
                n_tokens=n_tokens,
                degenerate_groups=sum(group.degenerate for group in batch.groups),
            )
        )
        return acc.value, acc.dlogits

    value, grad = value_and_grad(params, batch.inputs(), loss_fn)
    return ObjectiveResult(value=value, grad=grad, stats=captured[-1])


def grpo_objective(
    params: PolicyParams,
    batch: TrainingBatch,
    refs: FrozenReferences,
    config: TrainConfig,
) -> ObjectiveResult:
    """Clipped surrogate over all tokens, 1/T_i per trajectory, minus beta * KL."""
    return _evaluate('grpo', params, batch, refs, config)


def rapo_objective(
    params: PolicyParams,
    batch: TrainingBatch,
    refs: FrozenReferences,
    config: TrainConfig,
) -> ObjectiveResult:
    """RAPO_G: surrogate and reference KL at anchors, plus gamma*omega*(sqrt(D+delta) - sqrt(delta)).

    Trajectories without anchors fall back to the surrogate over all tokens.
    """
    return _evaluate('rapo_g', params, batch, refs, config)


def mixed_group_indices(batch: TrainingBatch) -> list[int]:
    return [i for i, group in enumerate(batch.groups) if group.mixed]


def rapo_d_objective(
    params: PolicyParams,
    batch: TrainingBatch,
    refs: FrozenReferences,
    config: TrainConfig,
) -> ObjectiveResult:
    """RAPO_D on the mixed-correctness groups: asymmetric clip, token-level normalisation, unrooted gamma term.

    Raises:
        EmptyBatch: If no group has both correct and incorrect answers.
    """
    keep = mixed_group_indices(batch)
    filtered = len(batch.groups) - len(keep)
    if not keep:
        msg = f'all {len(batch.groups)} groups were filtered by dynamic sampling'
        raise EmptyBatch(msg)
    if filtered:
        offsets = np.cumsum([0] + [group.size for group in batch.groups])
        rows = [row for i in keep for row in range(offsets[i], offsets[i + 1])]
        refs = FrozenReferences(tuple(refs.trajectories[row] for row in rows))
        batch = batch.subset(keep)
    result = _evaluate('rapo_d', params, batch, refs, config)
    return replace(result, stats=replace(result.stats, filtered_groups=filtered))


OBJECTIVES = {'grpo': grpo_objective, 'rapo_g': rapo_objective, 'rapo_d': rapo_d_objective}


def window_kl(params: PolicyParams, trajectory: 'Trajectory', k: int, plan: 'AnchorPlan') -> float:
    """Window-averaged KL(pi_theta || pi_theta^mask) for the anchor at plan index ``k``."""
    inputs = trajectory.model_input[None]
    plain = forward(params, inputs).logits[0]
    masked = forward(params, inputs, mask=plan.masks[k]).logits[0]
    values = [
        kl(ProbabilityVector.from_logits(plain[position]), ProbabilityVector.from_logits(masked[position]))
        for position in plan.window_positions(k)
    ]
    return float(np.mean(values))


def position_kl(logits: np.ndarray, reference_logits: np.ndarray) -> np.ndarray:
    """Row-wise KL(softmax(logits) || softmax(reference_logits)), clamped at 0."""
    log_p = log_softmax(logits, axis=-1)
    log_q = log_softmax(reference_logits, axis=-1)
    return np.maximum(np.sum(softmax(logits, axis=-1) * (log_p - log_q), axis=-1), 0.0)


__all__ = [
    'OBJECTIVES',
    'FrozenReferences',
    'ObjectiveResult',
    'ObjectiveStats',
    'TrainingBatch',
    'TrajectoryReferences',
    'freeze_references',
    'grpo_advantages',
    'grpo_objective',
    'mixed_group_indices',
    'position_kl',
    'rapo_d_objective',
    'rapo_objective',
    'window_kl',
]
