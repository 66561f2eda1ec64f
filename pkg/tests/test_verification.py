import json
from collections import Counter
from pathlib import Path

import pytest
from pytest_mock import MockerFixture

from rapo_lab import theory
from rapo_lab.models import SweepConfig
from rapo_lab.verification import REPORT_FILENAME, evaluate_seed, run_sweep, sample_instance


@pytest.fixture
def sweep_config() -> SweepConfig:
    return SweepConfig(seeds=6, cloud_size=4, tilt_trials=8, workers=1)


def test_small_sweep_has_no_violations(tmp_path: Path, sweep_config: SweepConfig) -> None:
    report = tmp_path / REPORT_FILENAME
    summary = run_sweep(sweep_config, report)
    assert summary.ok, summary.violations
    lines = report.read_text().splitlines()
    assert len(lines) == len(summary.records)
    seeds = [json.loads(line)['seed'] for line in lines]
    assert seeds == sorted(seeds)
    assert set(seeds) == set(range(6))
    counts = summary.counts()
    for name in ('psi_dual_path', 'mi_identity', 'exact_decomposition', 'native_gain', 'topk_exhaustive'):
        assert counts[name].get('SATISFIED', 0) > 0, name


def test_zero_seeds_write_an_empty_report(tmp_path: Path) -> None:
    report = tmp_path / 'nested' / REPORT_FILENAME
    summary = run_sweep(SweepConfig(seeds=0), report)
    assert summary.ok
    assert summary.records == []
    assert report.read_text() == ''


def test_worker_count_does_not_change_the_report(sweep_config: SweepConfig) -> None:
    sequential = run_sweep(sweep_config.model_copy(update={'seeds': 4}))
    parallel = run_sweep(sweep_config.model_copy(update={'seeds': 4, 'workers': 2}))
    assert [record.model_dump() for record in parallel.records] == [
        record.model_dump() for record in sequential.records
    ]


def test_seed_evaluation_is_pure(sweep_config: SweepConfig) -> None:
    assert evaluate_seed(sweep_config, 3) == evaluate_seed(sweep_config, 3)


def test_instances_respect_size_caps() -> None:
    config = SweepConfig(max_vocab=3, max_horizon=2, max_visual=2)
    for seed in range(20):
        world = sample_instance(config, seed).world
        assert 2 <= world.vocab <= 3
        assert 1 <= world.horizon <= 2
        assert world.n_visual == 2


def test_instance_enumerates_every_masked_history() -> None:
    config = SweepConfig(max_horizon=3)
    instances = (sample_instance(config, seed) for seed in range(50))
    instance = next(instance for instance in instances if instance.world.horizon == 3)
    histories = {(mh.t, mh.masked_positions) for mh in instance.histories()}
    assert histories == {
        (1, frozenset()),
        (2, frozenset()),
        (2, frozenset({1})),
        (3, frozenset()),
        (3, frozenset({1})),
        (3, frozenset({2})),
        (3, frozenset({1, 2})),
    }
    assert len(list(instance.anchor_sets())) == 7


def test_every_history_gets_every_intervention(sweep_config: SweepConfig) -> None:
    seed = next(seed for seed in range(50) if sample_instance(sweep_config, seed).world.horizon == 3)
    records = evaluate_seed(sweep_config, seed)
    decompositions = Counter(
        (record.t, tuple(record.masked or ()), record.detail)
        for record in records
        if record.inequality == 'exact_decomposition'
    )
    histories = {key[:2] for key in decompositions}
    assert histories == {(1, ()), (2, ()), (2, (1,)), (3, ()), (3, (1,)), (3, (2,)), (3, (1, 2))}
    assert {key[2] for key in decompositions} == {'native', 'tilt', 'random', 'point_mass'}
    native = [record for record in records if record.inequality == 'native_gain']
    assert len(native) == 7
    assert all(record.lhs == 0.0 for record in native)
    assert sum(record.inequality == 'anchor_set_gain_floor' for record in records) == 7


def test_tilt_optimality_uses_a_thousand_draws_by_default() -> None:
    config = SweepConfig(seeds=1, cloud_size=2)
    assert config.tilt_trials == 1000
    record = next(record for record in evaluate_seed(config, 0) if record.inequality == 'tilt_optimality')
    assert record.detail == '1000 draws'
    assert record.status == 'SATISFIED'


def test_flipped_score_sign_is_reported(mocker: MockerFixture, sweep_config: SweepConfig) -> None:
    original = theory._psi_closed_form
    mocker.patch.object(theory, '_psi_closed_form', side_effect=lambda view, v: -original(view, v))
    summary = run_sweep(sweep_config.model_copy(update={'seeds': 3}))
    assert not summary.ok
    assert {record.inequality for record in summary.violations} >= {'psi_dual_path', 'identity'}
