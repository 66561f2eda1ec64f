"""Anchor selection and chain masks.

Anchors are the generated steps with the highest rollout-time entropy.
For anchor ``t_k`` the chain mask stops the window queries
``t_k .. t_k + w' - 1`` from attending to the vision prefix and to every
earlier anchor; all other attention is left alone.

Inside a sequence the window queries of an anchor step sit at emit
positions (the position whose output is the step's next-token law),
while an earlier anchor is blocked at the position holding its sampled
token, one to the right of its emit position.
"""

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from rapo_lab.dist import branching_room_weight
from rapo_lab.models import AnchorStrategy, TrainConfig
from rapo_lab.policy import AttentionMaskSpec
from rapo_lab.task import SequenceLayout


def anchor_count(length: int, rho: float) -> int:
    """floor(rho * length), robust to representation error in rho."""
    return min(length, math.floor(rho * length + 1e-9))


def select_anchors(entropies: Sequence[float] | np.ndarray, rho: float) -> tuple[int, ...]:
    """1-based steps of the floor(rho*T) highest entropies, ascending.

    Equal entropies prefer the earlier step.
    """
    values = np.asarray(entropies, dtype=np.float64)
    count = anchor_count(values.size, rho)
    order = np.argsort(-values, kind='stable')[:count]
    return tuple(int(i) + 1 for i in sorted(order))


def select_anchors_by(
    strategy: AnchorStrategy,
    entropies: Sequence[float] | np.ndarray,
    rho: float,
    rng: np.random.Generator | None = None,
    fixed_count: int = 0,
) -> tuple[int, ...]:
    """Anchor selection for the ablations; ``entropy`` is the default rule."""
    values = np.asarray(entropies, dtype=np.float64)
    length = values.size
    if strategy == 'entropy':
        return select_anchors(values, rho)
    if strategy == 'random':
        if rng is None:
            msg = 'random anchor selection needs a generator'
            raise ValueError(msg)
        picked = rng.choice(length, size=anchor_count(length, rho), replace=False)
        return tuple(sorted(int(i) + 1 for i in picked))
    if strategy == 'low_entropy':
        order = np.argsort(values, kind='stable')[: anchor_count(length, rho)]
        return tuple(sorted(int(i) + 1 for i in order))
    if strategy == 'outlier':
        if length == 0:
            return ()
        threshold = values.mean() + values.std()
        return tuple(int(i) + 1 for i in np.flatnonzero(values > threshold))
    if strategy == 'fixed_count':
        order = np.argsort(-values, kind='stable')[: min(fixed_count, length)]
        return tuple(sorted(int(i) + 1 for i in order))
    msg = f'unknown anchor strategy "{strategy}"'
    raise ValueError(msg)


def window_length(anchor: int, last: int, w: int) -> int:
    """w' = min(w, T - t_k + 1)."""
    return min(w, last - anchor + 1)


def build_chain_mask(
    anchors: Sequence[int],
    k: int,
    vision_positions: Sequence[int],
    last: int,
    w: int,
    anchor_keys: Sequence[int] | None = None,
) -> AttentionMaskSpec:
    """Chain mask for the k-th anchor (1-based).

    Blocks (q, key) for q in [t_k, t_k + w' - 1] and key in the vision
    positions or the anchors before t_k; ``last`` is the final index T.
    ``anchor_keys`` gives the key index of each anchor when it differs
    from the query index (defaults to ``anchors``).
    """
    if not 1 <= k <= len(anchors):
        msg = f'anchor index {k} outside 1..{len(anchors)}'
        raise ValueError(msg)
    anchor = anchors[k - 1]
    span = window_length(anchor, last, w)
    if anchor_keys is None:
        anchor_keys = anchors
    elif len(anchor_keys) != len(anchors):
        msg = f'got {len(anchor_keys)} anchor keys for {len(anchors)} anchors'
        raise ValueError(msg)
    keys = (*vision_positions, *anchor_keys[: k - 1])
    return AttentionMaskSpec.block_keys(range(anchor, anchor + span), keys)


@dataclass(frozen=True)
class AnchorPlan:
    """Anchors of one trajectory with their masks, windows and weights.

    ``steps`` are 1-based generated steps; ``positions`` are their emit
    positions in the policy input. Index ``i`` below is 0-based.
    """

    steps: tuple[int, ...]
    positions: tuple[int, ...]
    masks: tuple[AttentionMaskSpec, ...]
    windows: tuple[int, ...]
    omegas: tuple[float, ...]

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def empty(self) -> bool:
        return not self.steps

    def window_positions(self, i: int) -> range:
        return range(self.positions[i], self.positions[i] + self.windows[i])

    def window_steps(self, i: int) -> range:
        return range(self.steps[i], self.steps[i] + self.windows[i])


def plan_for_steps(
    steps: Sequence[int],
    entropies: np.ndarray,
    layout: SequenceLayout,
    length: int,
    window: int,
) -> AnchorPlan:
    positions = tuple(layout.emit_position(t) for t in steps)
    keys = tuple(layout.token_position(t) for t in steps)
    last = layout.emit_position(length)
    masks = tuple(
        build_chain_mask(positions, k, layout.vision_positions, last, window, anchor_keys=keys)
        for k in range(1, len(positions) + 1)
    )
    return AnchorPlan(
        steps=tuple(steps),
        positions=positions,
        masks=masks,
        windows=tuple(window_length(t, length, window) for t in steps),
        omegas=tuple(branching_room_weight(float(entropies[t - 1])) for t in steps),
    )


def plan_anchors(
    entropies: np.ndarray,
    config: TrainConfig,
    layout: SequenceLayout,
    rng: np.random.Generator | None = None,
) -> AnchorPlan:
    """Select anchors from rollout-time entropies and build their masks."""
    steps = select_anchors_by(config.anchor_strategy, entropies, config.rho, rng, config.fixed_anchor_count)
    return plan_for_steps(steps, entropies, layout, len(entropies), config.window)


__all__ = [
    'AnchorPlan',
    'anchor_count',
    'build_chain_mask',
    'plan_anchors',
    'plan_for_steps',
    'select_anchors',
    'select_anchors_by',
    'window_length',
]
