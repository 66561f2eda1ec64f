from itertools import product

import numpy as np
import pytest

from rapo_lab.errors import ZeroProbabilityHistory
from rapo_lab.world import MARGINAL, MaskedHistory, MaskedView, WorldModel, condition_masked


@pytest.fixture
def world() -> WorldModel:
    return WorldModel.random(np.random.default_rng(5), n_visual=3, vocab=3, horizon=3)


def _enumerated_next_token(world: WorldModel, mh: MaskedHistory, v: int) -> np.ndarray:
    """Sum the joint over every completion of the masked positions, then renormalise."""
    t = mh.t
    out = np.zeros(world.vocab)
    masked = sorted(mh.masked_positions)
    for fill in product(range(world.vocab), repeat=len(masked)):
        prefix = list(mh.realized_prefix)
        for position, token in zip(masked, fill, strict=True):
            prefix[position - 1] = token
        for y in range(world.vocab):
            for rest in product(range(world.vocab), repeat=world.horizon - t):
                out[y] += world.joint[(v, *prefix, y, *rest)]
    return out / out.sum()


def test_random_world_is_normalised(world: WorldModel) -> None:
    assert abs(world.joint.sum() - 1.0) <= 1e-12
    assert world.joint.shape == (3, 3, 3, 3)
    assert np.all(world.joint > 0.0)


def test_world_rejects_out_of_range_caps() -> None:
    with pytest.raises(ValueError, match='vocab'):
        WorldModel.random(np.random.default_rng(0), n_visual=2, vocab=7, horizon=2)
    with pytest.raises(ValueError, match='horizon'):
        WorldModel.random(np.random.default_rng(0), n_visual=2, vocab=3, horizon=4)


def test_world_rejects_unnormalised_joint() -> None:
    with pytest.raises(ValueError, match='expected 1'):
        WorldModel(np.full((2, 2), 0.3))


def test_empty_history_gives_first_token_law(world: WorldModel) -> None:
    law = condition_masked(world, MaskedHistory(()), 1)
    expected = world.joint[1].reshape(world.vocab, -1).sum(axis=1)
    np.testing.assert_allclose(law.probs, expected / expected.sum(), atol=1e-15)


def test_independent_world_posterior_equals_prior() -> None:
    prior = np.array([0.2, 0.3, 0.5])
    world = WorldModel.independent(prior, np.array([[0.1, 0.4], [0.3, 0.2]]))
    view = MaskedView.build(world, MaskedHistory((1,)))
    np.testing.assert_allclose(view.posterior, prior, atol=1e-15)


@pytest.mark.parametrize('masked', [frozenset(), frozenset({1}), frozenset({2}), frozenset({1, 2})])
def test_condition_masked_matches_enumeration(world: WorldModel, masked: frozenset[int]) -> None:
    mh = MaskedHistory((2, 0), masked)
    for v in range(world.n_visual):
        law = condition_masked(world, mh, v)
        np.testing.assert_allclose(law.probs, _enumerated_next_token(world, mh, v), atol=1e-12)


def test_marginal_mixes_over_posterior(world: WorldModel) -> None:
    mh = MaskedHistory((1, 2), frozenset({1}))
    view = MaskedView.build(world, mh)
    mixed = sum(view.posterior[v] * condition_masked(world, mh, v).probs for v in range(world.n_visual))
    np.testing.assert_allclose(condition_masked(world, mh, MARGINAL).probs, mixed, atol=1e-12)


def test_masked_positions_must_lie_in_prefix() -> None:
    with pytest.raises(ValueError, match='outside'):
        MaskedHistory((0, 1), frozenset({3}))


def test_zero_probability_history_raises() -> None:
    world = WorldModel.copy_channel(np.array([0.5, 0.5, 0.0]), horizon=2)
    with pytest.raises(ZeroProbabilityHistory):
        condition_masked(world, MaskedHistory((2,)), 0)


def test_suffix_law_continuation_sums_to_one(world: WorldModel) -> None:
    law = MaskedView.build(world, MaskedHistory((0,))).suffix_law(2)
    assert law.table.shape == (3, 3)
    np.testing.assert_allclose(law.continuation(1).sum(), 1.0)
    np.testing.assert_allclose(law.first_token.probs.sum(), 1.0)
