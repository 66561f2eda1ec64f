import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from rapo_lab.diagnostics import (
    MEASURES,
    NOISE_SIGMAS,
    KlProfile,
    aggregate_profiles,
    anchor_blind_mask,
    anchor_concentration,
    attention_guided_masking,
    contrastive_kl_profile,
    greedy_decode,
    next_anchor_delta_kl,
    noise_perturb_kl,
    noise_sweep,
    propagation_delta_kl,
    run_diagnostics,
    vision_attention_profile,
    vision_blind_mask,
)
from rapo_lab.errors import NoNextAnchor
from rapo_lab.models import TrainConfig
from rapo_lab.objective import position_kl
from rapo_lab.policy import PolicyParams, forward
from rapo_lab.rng import KeyedStreams
from rapo_lab.rollout import Trajectory, rollout_group, rollout_groups
from rapo_lab.task import SequenceLayout, TaskInstance, make_task_instance
from rapo_lab.trainer import TrainState


@pytest.fixture
def policy(train_config: TrainConfig) -> PolicyParams:
    return PolicyParams.init(train_config.policy, np.random.default_rng(3))


@pytest.fixture
def blind_policy(policy: PolicyParams, train_config: TrainConfig) -> PolicyParams:
    """Attention values are zero, so no position ever reads another."""
    blind = policy.copy()
    for i in range(train_config.policy.n_layers):
        blind[f'l{i}.wv'][...] = 0.0
    return blind


@pytest.fixture
def instances(train_config: TrainConfig) -> list[TaskInstance]:
    streams = KeyedStreams(7)
    return [make_task_instance(streams.stream('task', 0, i), train_config.task, i) for i in range(3)]


@pytest.fixture
def trajectories(policy: PolicyParams, instances: list[TaskInstance]) -> list[Trajectory]:
    groups = rollout_groups(policy, instances, 2, 1.0, KeyedStreams(1), 0)
    return [trajectory for group in groups for trajectory in group.trajectories]


def _synthetic(tokens: list[int], entropies: list[float], instance_id: int = 0) -> Trajectory:
    size = len(tokens)
    return Trajectory(
        instance_id=instance_id,
        group_index=0,
        prompt_tokens=np.zeros(1, dtype=np.int64),
        tokens=np.array(tokens, dtype=np.int64),
        dists=np.full((size, 2), 0.5),
        entropies=np.array(entropies),
        log_probs=np.full(size, np.log(0.5)),
    )


def test_vision_blind_mask_covers_text_queries(layout: SequenceLayout) -> None:
    mask = vision_blind_mask(layout, 9)
    assert mask.blocked == frozenset((q, k) for q in range(3, 9) for k in range(3))


def test_anchor_blind_mask(layout: SequenceLayout) -> None:
    assert anchor_blind_mask(layout, 2).blocked == frozenset({(6, 0), (6, 1), (6, 2)})


def test_profile_matches_pointwise_kl(
    policy: PolicyParams,
    trajectories: list[Trajectory],
    layout: SequenceLayout,
) -> None:
    trajectory = trajectories[0]
    inputs = trajectory.model_input[None]
    positions = [layout.emit_position(t) for t in range(1, trajectory.length + 1)]
    seeing = forward(policy, inputs).logits[0, positions]
    blinded = forward(policy, inputs, mask=vision_blind_mask(layout, inputs.shape[1])).logits[0, positions]
    profile = contrastive_kl_profile(policy, trajectory, layout)
    np.testing.assert_allclose(profile.values, position_kl(seeing, blinded), atol=1e-15)
    assert len(profile) == trajectory.length
    assert np.all(profile.values > 0.0)


def test_profile_window_average(policy: PolicyParams, trajectories: list[Trajectory], layout: SequenceLayout) -> None:
    pointwise = contrastive_kl_profile(policy, trajectories[0], layout).values
    averaged = contrastive_kl_profile(policy, trajectories[0], layout, w=2).values
    expected = [pointwise[0:2].mean(), pointwise[1:3].mean(), pointwise[2:4].mean(), pointwise[3]]
    np.testing.assert_allclose(averaged, expected, atol=1e-15)


def test_profile_window_must_be_positive(
    policy: PolicyParams,
    trajectories: list[Trajectory],
    layout: SequenceLayout,
) -> None:
    with pytest.raises(ValueError, match='at least 1'):
        contrastive_kl_profile(policy, trajectories[0], layout, w=0)


def test_vision_ignoring_policy_has_flat_measurements(
    blind_policy: PolicyParams,
    trajectories: list[Trajectory],
    layout: SequenceLayout,
) -> None:
    for trajectory in trajectories:
        assert not np.any(contrastive_kl_profile(blind_policy, trajectory, layout).values)
        for k in (1, 2):
            record = propagation_delta_kl(blind_policy, trajectory, layout, (1, 3), k, w=3)
            assert record.window_delta == 0.0
            assert record.next_anchor_delta in (0.0, None)


def test_propagation_record_fields(
    policy: PolicyParams,
    trajectories: list[Trajectory],
    layout: SequenceLayout,
) -> None:
    trajectory = trajectories[0]
    first = propagation_delta_kl(policy, trajectory, layout, (1, 4), 1)
    assert (first.anchor_index, first.anchor_step) == (1, 1)
    assert first.next_anchor_delta is not None
    assert first.window_delta is not None
    last = propagation_delta_kl(policy, trajectory, layout, (1, 4), 2)
    assert last.next_anchor_delta is None
    assert last.window_delta is None
    with pytest.raises(ValueError, match='outside'):
        propagation_delta_kl(policy, trajectory, layout, (1, 4), 3)


def test_next_anchor_delta() -> None:
    before = np.array([0.5, 0.4, 0.3, 0.2])
    after = np.array([0.5, 0.1, 0.35, 0.2])
    assert next_anchor_delta_kl(before, after, (1, 3), 1) == pytest.approx(0.05)
    with pytest.raises(NoNextAnchor):
        next_anchor_delta_kl(before, after, (1, 3), 2)


def test_zero_noise_changes_nothing(
    policy: PolicyParams,
    trajectories: list[Trajectory],
    layout: SequenceLayout,
) -> None:
    values = noise_perturb_kl(policy, trajectories[0], layout, 0.0, np.random.default_rng(0))
    assert not np.any(values)
    noisy = noise_perturb_kl(policy, trajectories[0], layout, 1.0, np.random.default_rng(0))
    assert np.all(noisy > 0.0)
    with pytest.raises(ValueError, match='non-negative'):
        noise_perturb_kl(policy, trajectories[0], layout, -0.1, np.random.default_rng(0))


def test_noise_sweep_records(policy: PolicyParams, trajectories: list[Trajectory], layout: SequenceLayout) -> None:
    records = noise_sweep(policy, trajectories[:2], layout, NOISE_SIGMAS, KeyedStreams(0))
    assert len(records) == 2 * len(NOISE_SIGMAS)
    assert [record.sigma for record in records[:4]] == list(NOISE_SIGMAS)
    assert records[0].mean_kl == 0.0
    assert all(record.mean_kl >= 0.0 for record in records)


def test_aggregate_profiles_by_stratum() -> None:
    profiles = [
        KlProfile(np.array([0.2, 0.4]), 0, 0, correct=True),
        KlProfile(np.array([0.6, 0.0]), 0, 1, correct=False),
        KlProfile(np.array([0.4, 0.2]), 1, 0, correct=True),
    ]
    frame = aggregate_profiles(profiles)
    assert list(frame.columns) == ['stratum', 'position', 'mean_kl', 'count']
    rows = {(row['stratum'], row['position']): (row['mean_kl'], row['count']) for row in frame.to_dict('records')}
    assert rows[('all', 1)] == (pytest.approx(0.4), 3)
    assert rows[('correct', 2)] == (pytest.approx(0.3), 2)
    assert rows[('incorrect', 1)] == (pytest.approx(0.6), 1)


def test_aggregate_of_nothing_is_empty() -> None:
    frame = aggregate_profiles([])
    assert frame.empty
    assert list(frame.columns) == ['stratum', 'position', 'mean_kl', 'count']


def test_single_token_type_is_anchored_at_rho() -> None:
    rng = np.random.default_rng(0)
    corpus = [_synthetic([7] * 10, list(rng.uniform(size=10)), i) for i in range(3)]
    table = anchor_concentration(corpus, 0.2)
    assert table.to_dict('records') == [{'token_type': 7, 'occurrences': 30, 'anchor_fraction': pytest.approx(0.2)}]


def test_concentration_ranks_and_drops_rare_types() -> None:
    entropies = [1.0, 0.0] * 5
    corpus = [_synthetic([3, 4] * 5, entropies, i) for i in range(2)] + [_synthetic([5] * 10, [0.0] * 10, 2)]
    corpus.append(_synthetic([9] * 3 + [5] * 7, [0.0] * 10, 3))
    table = anchor_concentration(corpus, 0.2)
    assert list(table['token_type']) == [3, 5, 4]
    assert table.loc[0, 'anchor_fraction'] == pytest.approx(0.4)
    assert 9 not in set(table['token_type'])


def test_concentration_needs_trajectories() -> None:
    with pytest.raises(ValueError, match='at least one'):
        anchor_concentration([], 0.2)


def test_vision_attention_profile_shape(
    policy: PolicyParams,
    trajectories: list[Trajectory],
    layout: SequenceLayout,
) -> None:
    profile = vision_attention_profile(policy, trajectories[0], layout)
    assert profile.shape == (2, trajectories[0].length)
    assert np.all((profile >= 0.0) & (profile <= 1.0 + 1e-12))


def test_greedy_decode_matches_greedy_rollout(policy: PolicyParams, instances: list[TaskInstance]) -> None:
    [decoded] = greedy_decode(policy, instances[:1])
    group = rollout_group(policy, instances[0], 2, 1.0, KeyedStreams(0), greedy=True)
    np.testing.assert_array_equal(decoded.tokens, group.trajectories[0].tokens)
    np.testing.assert_allclose(decoded.entropies, group.trajectories[0].entropies, atol=1e-12)


def test_attention_guided_masking_record(
    policy: PolicyParams,
    instances: list[TaskInstance],
    layout: SequenceLayout,
) -> None:
    record = attention_guided_masking(policy, instances, layout, rho=0.5, rng=np.random.default_rng(0))
    assert record.instances == 3
    assert record.masked_positions == 1
    for accuracy in (record.baseline_accuracy, record.attention_masked_accuracy, record.random_masked_accuracy):
        assert 0.0 <= accuracy <= 1.0
    assert record.attention_drop == pytest.approx(record.baseline_accuracy - record.attention_masked_accuracy)


def test_run_diagnostics_writes_every_table(tmp_path: Path, train_config: TrainConfig) -> None:
    config = train_config.model_copy(update={'rho': 0.5})
    ckpt = TrainState.initial(config).to_checkpoint()
    written = run_diagnostics(ckpt, MEASURES, tmp_path, instances=2, seed=0)
    assert set(written) == set(MEASURES)
    profiles = pd.read_csv(tmp_path / 'profiles.csv')
    assert np.all(np.isfinite(profiles['mean_kl']))
    assert set(profiles['stratum']) <= {'all', 'correct', 'incorrect'}
    noise = (tmp_path / 'noise.jsonl').read_text().splitlines()
    assert len(noise) == 2 * config.group_size * len(NOISE_SIGMAS)
    propagation = [json.loads(line) for line in (tmp_path / 'propagation.jsonl').read_text().splitlines()]
    assert len(propagation) == 2 * config.group_size * 2
    assert (tmp_path / 'concentration.csv').exists()
    attention = pd.read_csv(tmp_path / 'vision_attention.csv')
    assert list(attention.columns) == ['layer', 'position', 'mass']
    assert len((tmp_path / 'attention_masking.jsonl').read_text().splitlines()) == 1
