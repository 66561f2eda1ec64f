from dataclasses import dataclass
from itertools import combinations

import numpy as np
import pytest

from rapo_lab.anchors import (
    anchor_count,
    build_chain_mask,
    plan_anchors,
    plan_for_steps,
    select_anchors,
    select_anchors_by,
    window_length,
)
from rapo_lab.dist import branching_room_weight
from rapo_lab.models import TrainConfig
from rapo_lab.policy import PolicyParams, forward
from rapo_lab.task import SequenceLayout


@dataclass
class CountCase:
    name: str
    length: int
    rho: float
    expected: int


@pytest.mark.parametrize(
    'case',
    [
        CountCase('ten_at_fifth', 10, 0.2, 2),
        CountCase('rounds_down', 9, 0.2, 1),
        CountCase('too_short', 4, 0.2, 0),
        CountCase('float_product', 10, 0.3, 3),
        CountCase('everything', 7, 1.0, 7),
    ],
    ids=lambda case: case.name,
)
def test_anchor_count(case: CountCase) -> None:
    assert anchor_count(case.length, case.rho) == case.expected


def test_select_highest_entropies() -> None:
    entropies = [0.1, 0.9, 0.2, 0.3, 1.5, 0.0, 0.4, 0.2, 0.1, 0.3]
    assert select_anchors(entropies, 0.2) == (2, 5)


def test_equal_entropies_prefer_earlier_steps() -> None:
    assert select_anchors([0.5] * 10, 0.2) == (1, 2)


def test_no_anchors_below_threshold() -> None:
    assert select_anchors([1.0, 2.0, 3.0], 0.2) == ()


def test_chain_mask_example() -> None:
    mask = build_chain_mask((3, 5), 2, (0, 1), last=6, w=1)
    assert mask.blocked == frozenset({(5, 0), (5, 1), (5, 3)})


def test_first_anchor_blocks_only_vision() -> None:
    mask = build_chain_mask((3, 5), 1, (0, 1), last=6, w=2)
    assert mask.blocked == frozenset({(3, 0), (3, 1), (4, 0), (4, 1)})


def test_window_clipped_at_the_end() -> None:
    assert window_length(6, 6, 3) == 1
    mask = build_chain_mask((2, 6), 2, (0,), last=6, w=3)
    assert mask.blocked == frozenset({(6, 0), (6, 2)})


@pytest.mark.parametrize('k', [0, 3])
def test_chain_mask_rejects_bad_index(k: int) -> None:
    with pytest.raises(ValueError, match='outside'):
        build_chain_mask((3, 5), k, (0,), last=6, w=1)


def _oracle(anchors: tuple[int, ...], k: int, vision: tuple[int, ...], last: int, w: int) -> set[tuple[int, int]]:
    anchor = anchors[k - 1]
    blocked = set()
    for q in range(last + 1):
        for key in range(last + 1):
            in_window = anchor <= q <= min(anchor + w - 1, last)
            if in_window and (key in vision or key in anchors[: k - 1]):
                blocked.add((q, key))
    return blocked


def test_chain_mask_matches_exhaustive_oracle() -> None:
    for n_vision in range(5):
        vision = tuple(range(n_vision))
        for length in range(1, 9):
            last = n_vision + length - 1
            generated = range(n_vision, last + 1)
            for size in range(1, 4):
                for anchors in combinations(generated, size):
                    for k in range(1, size + 1):
                        for w in (1, 2, 3):
                            mask = build_chain_mask(anchors, k, vision, last, w)
                            assert set(mask.blocked) == _oracle(anchors, k, vision, last, w)


def test_strategies() -> None:
    entropies = np.array([0.1, 0.9, 0.2, 0.3, 1.5, 0.0, 0.4, 0.2, 0.1, 0.3])
    assert select_anchors_by('entropy', entropies, 0.2) == (2, 5)
    assert select_anchors_by('low_entropy', entropies, 0.2) == (1, 6)
    assert select_anchors_by('fixed_count', entropies, 0.2, fixed_count=3) == (2, 5, 7)
    assert select_anchors_by('outlier', entropies, 0.2) == (2, 5)
    picked = select_anchors_by('random', entropies, 0.2, rng=np.random.default_rng(0))
    assert len(picked) == 2
    assert list(picked) == sorted(picked)


def test_random_strategy_needs_a_generator() -> None:
    with pytest.raises(ValueError, match='generator'):
        select_anchors_by('random', [0.1, 0.2], 1.0)


def test_plan_uses_emit_positions(train_config: TrainConfig, layout: SequenceLayout) -> None:
    entropies = np.array([0.1, 1.3, 0.2, 0.9])
    config = train_config.model_copy(update={'rho': 0.5, 'window': 2})
    plan = plan_anchors(entropies, config, layout)
    assert plan.steps == (2, 4)
    assert plan.positions == (6, 8)
    assert plan.windows == (2, 1)
    assert plan.omegas == (branching_room_weight(1.3), branching_room_weight(0.9))
    assert list(plan.window_positions(0)) == [6, 7]
    assert list(plan.window_steps(1)) == [4]
    assert plan.masks[1].blocked == frozenset({(8, 0), (8, 1), (8, 2), (8, 7)})


def test_plan_blocks_the_earlier_anchor_token(train_config: TrainConfig, layout: SequenceLayout) -> None:
    config = train_config.model_copy(update={'rho': 0.5, 'window': 2})
    plan = plan_anchors(np.array([0.1, 1.3, 0.2, 0.9]), config, layout)
    params = PolicyParams.init(train_config.policy, np.random.default_rng(4))
    tokens = np.array([[0, 1, 2, 13, 14, 12, 9, 5, 10]])
    changed = tokens.copy()
    changed[0, layout.token_position(2)] = 3
    query = plan.positions[1]
    masked = [forward(params, seq, mask=plan.masks[1]).logits[0, query] for seq in (tokens, changed)]
    np.testing.assert_allclose(masked[0], masked[1], atol=1e-12)
    visible = [forward(params, seq).logits[0, query] for seq in (tokens, changed)]
    assert not np.allclose(visible[0], visible[1])


def test_chain_mask_with_separate_anchor_keys() -> None:
    mask = build_chain_mask((3, 5), 2, (0,), last=6, w=1, anchor_keys=(4, 6))
    assert mask.blocked == frozenset({(5, 0), (5, 4)})
    with pytest.raises(ValueError, match='anchor keys'):
        build_chain_mask((3, 5), 2, (0,), last=6, w=1, anchor_keys=(4,))


def test_empty_plan(layout: SequenceLayout) -> None:
    plan = plan_for_steps((), np.zeros(4), layout, 4, 3)
    assert plan.empty
    assert len(plan) == 0
    assert plan.masks == ()
