"""Seeded sweep of the theory oracle over random tiny worlds.

Each seed builds one random world and samples a realized trajectory. Every
step t and every masked subset of its history is then checked, and every
identity and lower bound is recorded as a
:class:`~rapo_lab.models.VerificationRecord`. Seeds are independent, so the
sweep fans out over a process pool and is reduced back into seed order.
"""

import math
from collections import Counter
from collections.abc import Iterator
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations, repeat
from pathlib import Path

import numpy as np
from hotlog import get_logger
from hotlog.live import maybe_live_logging

from rapo_lab.dist import ProbabilityVector, first_order_gain, kl, solve_tilt_for_radius
from rapo_lab.errors import AssumptionViolated, IdentityViolation, ZeroProbabilityHistory
from rapo_lab.models import Status, SweepConfig, VerificationRecord
from rapo_lab.rng import KeyedStreams
from rapo_lab.theory import (
    NATIVE,
    BoundCheck,
    Intervention,
    decomposition_terms,
    mi_identity_gap,
    point_mass_intervention,
    psi_matrix,
    psi_path_gap,
    random_feasible_cloud,
    random_feasible_intervention,
    set_lower_bound,
    tilted_intervention,
    topk_modular_check,
    verify_gain_bounds,
)
from rapo_lab.world import MaskedHistory, MaskedView, WorldModel

logger = get_logger(__name__)

IDENTITY_LIMIT = 1e-9
CONCENTRATIONS = (0.3, 1.0, 3.0)
REPORT_FILENAME = 'verification.jsonl'


@dataclass(frozen=True)
class SweepInstance:
    seed: int
    world: WorldModel
    trajectory: tuple[int, ...]

    def histories(self) -> Iterator[MaskedHistory]:
        """Every step t in 1..T with every masked subset of 1..t-1."""
        for t in range(1, len(self.trajectory) + 1):
            for size in range(t):
                for masked in combinations(range(1, t), size):
                    yield MaskedHistory(self.trajectory[: t - 1], frozenset(masked))

    def anchor_sets(self) -> Iterator[frozenset[int]]:
        """Every non-empty candidate anchor set over 1..T."""
        horizon = len(self.trajectory)
        for size in range(1, horizon + 1):
            for anchors in combinations(range(1, horizon + 1), size):
                yield frozenset(anchors)


def sample_instance(config: SweepConfig, seed: int) -> SweepInstance:
    rng = KeyedStreams(config.base_seed).stream('sweep', seed)
    n_visual = int(rng.integers(min(2, config.max_visual), config.max_visual + 1))
    vocab = int(rng.integers(2, config.max_vocab + 1))
    horizon = int(rng.integers(1, config.max_horizon + 1))
    concentration = float(rng.choice(CONCENTRATIONS))
    world = WorldModel.random(rng, n_visual=n_visual, vocab=vocab, horizon=horizon, concentration=concentration)
    _, trajectory = world.sample_trajectory(rng)
    return SweepInstance(seed, world, trajectory)


class _Recorder:
    def __init__(self, seed: int) -> None:
        self.seed = seed
        self.history: MaskedHistory | None = None
        self.records: list[VerificationRecord] = []

    def add(
        self,
        inequality: str,
        lhs: float,
        rhs: float,
        status: Status,
        *,
        epsilon: float | None = None,
        detail: str | None = None,
        margin: float | None = None,
    ) -> None:
        history = self.history
        self.records.append(
            VerificationRecord(
                seed=self.seed,
                inequality=inequality,
                lhs=lhs,
                rhs=rhs,
                margin=lhs - rhs if margin is None else margin,
                status=status,
                t=None if history is None else history.t,
                masked=None if history is None else sorted(history.masked_positions),
                epsilon=epsilon,
                detail=detail,
            )
        )

    def identity(self, name: str, gap: float, *, epsilon: float | None = None, detail: str | None = None) -> None:
        """Record a gap that must stay below IDENTITY_LIMIT."""
        status: Status = 'SATISFIED' if gap <= IDENTITY_LIMIT else 'VIOLATED'
        self.add(name, gap, IDENTITY_LIMIT, status, epsilon=epsilon, detail=detail, margin=IDENTITY_LIMIT - gap)

    def bound(self, check: BoundCheck, *, epsilon: float | None = None, detail: str | None = None) -> None:
        status: Status = 'SATISFIED' if check.satisfied else 'VIOLATED'
        self.add(check.inequality, check.lhs, check.rhs, status, epsilon=epsilon, detail=detail)


def _check_identities(recorder: _Recorder, view: MaskedView, rng: np.random.Generator, epsilon: float) -> None:
    recorder.identity('psi_dual_path', psi_path_gap(view))
    psi = psi_matrix(view)
    recorder.identity('mi_identity', mi_identity_gap(view, psi))
    interventions: tuple[tuple[str, Intervention], ...] = (
        ('native', NATIVE),
        ('tilt', tilted_intervention(view, epsilon, psi)),
        ('random', random_feasible_intervention(view, epsilon, rng)),
        ('point_mass', point_mass_intervention(view, psi)),
    )
    for name, q in interventions:
        radius = epsilon if name in {'tilt', 'random'} else None
        terms = decomposition_terms(view, q, psi)
        recorder.identity('exact_decomposition', abs(terms.residual), epsilon=radius, detail=name)
        if q is NATIVE:
            recorder.identity('native_gain', abs(terms.delta))
            continue
        check = BoundCheck('gain_exceeds_first_order', terms.delta, terms.first_order)
        recorder.bound(check, epsilon=radius, detail=name)


def _check_tilt(recorder: _Recorder, rng: np.random.Generator, config: SweepConfig) -> None:
    vocab = int(rng.integers(2, config.max_vocab + 1))
    m = ProbabilityVector(rng.dirichlet(np.ones(vocab)))
    psi = rng.standard_normal(vocab)
    epsilon = float(rng.choice(config.epsilons)) if config.epsilons else 1e-3
    solution = solve_tilt_for_radius(m, psi, epsilon)
    if not solution.saturated:
        recorder.identity('tilt_radius', abs(kl(solution.q, m) - epsilon), epsilon=epsilon)
    if not config.tilt_trials:
        return
    gain = first_order_gain(solution.q, m, psi)
    cloud = random_feasible_cloud(m.probs, epsilon, rng, config.tilt_trials)
    best = float(((cloud - m.probs[None, :]) @ psi).max())
    recorder.bound(BoundCheck('tilt_optimality', gain, best), epsilon=epsilon, detail=f'{config.tilt_trials} draws')


def _check_topk(recorder: _Recorder, rng: np.random.Generator, config: SweepConfig) -> None:
    length = int(rng.integers(1, config.topk_max_length + 1))
    scores = rng.standard_normal(length)
    k = int(rng.integers(0, length + 1))
    try:
        topk_modular_check(scores, k)
    except IdentityViolation as exc:
        recorder.add('topk_exhaustive', 1.0, 0.0, 'VIOLATED', detail=str(exc))
    else:
        recorder.add('topk_exhaustive', 0.0, 0.0, 'SATISFIED')


def _check_bounds(
    recorder: _Recorder,
    instance: SweepInstance,
    history: MaskedHistory,
    view: MaskedView,
    rng: np.random.Generator,
    config: SweepConfig,
) -> None:
    for epsilon in config.epsilons:
        try:
            report = verify_gain_bounds(
                instance.world, history, epsilon, rng=rng, cloud_size=config.cloud_size, view=view
            )
        except AssumptionViolated as exc:
            recorder.add('gain_bounds', 0.0, 0.0, 'SKIPPED', epsilon=epsilon, detail=exc.assumption)
            continue
        for check in report.checks:
            recorder.bound(check, epsilon=epsilon)


def _check_anchor_sets(
    recorder: _Recorder,
    instance: SweepInstance,
    rng: np.random.Generator,
    config: SweepConfig,
) -> None:
    if not config.epsilons:
        return
    epsilon = max(config.epsilons)
    for anchors in instance.anchor_sets():
        detail = ','.join(str(a) for a in sorted(anchors))
        try:
            check = set_lower_bound(
                instance.world, instance.trajectory, anchors, epsilon, rng=rng, cloud_size=config.cloud_size
            )
        except (AssumptionViolated, ZeroProbabilityHistory) as exc:
            recorder.add('anchor_set_gain_floor', 0.0, 0.0, 'SKIPPED', epsilon=epsilon, detail=f'{detail}: {exc}')
        else:
            recorder.bound(check, epsilon=epsilon, detail=detail)


def _check_history(
    recorder: _Recorder,
    instance: SweepInstance,
    history: MaskedHistory,
    rng: np.random.Generator,
    config: SweepConfig,
) -> None:
    try:
        view = MaskedView.build(instance.world, history)
    except ZeroProbabilityHistory as exc:
        recorder.add('masked_history', 0.0, 0.0, 'SKIPPED', detail=str(exc))
        return
    epsilon = max(config.epsilons) if config.epsilons else 1e-2
    try:
        _check_identities(recorder, view, rng, epsilon)
        _check_bounds(recorder, instance, history, view, rng, config)
    except IdentityViolation as exc:
        recorder.add('identity', 1.0, 0.0, 'VIOLATED', detail=str(exc))


def evaluate_seed(config: SweepConfig, seed: int) -> list[VerificationRecord]:
    """Every record for one seed; the work is a pure function of (config, seed)."""
    instance = sample_instance(config, seed)
    recorder = _Recorder(seed)
    rng = KeyedStreams(config.base_seed).stream('sweep', seed, 1)
    for history in instance.histories():
        recorder.history = history
        _check_history(recorder, instance, history, rng, config)
    recorder.history = None
    try:
        _check_anchor_sets(recorder, instance, rng, config)
    except IdentityViolation as exc:
        recorder.add('identity', 1.0, 0.0, 'VIOLATED', detail=str(exc))
    _check_tilt(recorder, rng, config)
    _check_topk(recorder, rng, config)
    return recorder.records


def _evaluate_many(config: SweepConfig, seeds: list[int]) -> list[list[VerificationRecord]]:
    return [evaluate_seed(config, seed) for seed in seeds]


def _chunks(seeds: list[int], size: int) -> Iterator[list[int]]:
    for start in range(0, len(seeds), size):
        yield seeds[start : start + size]


def _seed_results(config: SweepConfig, seeds: list[int]) -> Iterator[list[VerificationRecord]]:
    """Per-seed records in seed order, fanned out when workers > 1."""
    if config.workers == 1:
        for seed in seeds:
            yield evaluate_seed(config, seed)
        return
    chunk = max(1, math.ceil(len(seeds) / (4 * config.workers)))
    with ProcessPoolExecutor(max_workers=config.workers) as pool:
        for part in pool.map(_evaluate_many, repeat(config), _chunks(seeds, chunk)):
            yield from part


@dataclass
class SweepSummary:
    records: list[VerificationRecord] = field(default_factory=list)

    @property
    def violations(self) -> list[VerificationRecord]:
        return [record for record in self.records if record.status == 'VIOLATED']

    @property
    def skipped(self) -> int:
        return sum(record.status == 'SKIPPED' for record in self.records)

    @property
    def ok(self) -> bool:
        return not self.violations

    def counts(self) -> dict[str, dict[str, int]]:
        """Status counts per inequality."""
        table: dict[str, Counter[str]] = {}
        for record in self.records:
            table.setdefault(record.inequality, Counter())[record.status] += 1
        return {name: dict(counter) for name, counter in sorted(table.items())}


def run_sweep(config: SweepConfig, report_path: Path | None = None) -> SweepSummary:
    """Evaluate seeds ``0 .. config.seeds - 1`` and optionally write the report.

    The report holds one record per line in seed order, whatever the
    worker count.
    """
    seeds = list(range(config.seeds))
    summary = SweepSummary()
    logger.info('verify_phase_start', seeds=config.seeds, workers=config.workers)
    with maybe_live_logging('Verifying theory...') as live:
        for seed, records in zip(seeds, _seed_results(config, seeds), strict=True):
            summary.records.extend(records)
            bad = [record.inequality for record in records if record.status == 'VIOLATED']
            if bad:
                logger.warning('verification_violation', seed=seed, inequalities=bad)
            if live is not None and seed % 20 == 0:
                live.info('verify_progress', seed=seed)

    if report_path is not None:
        report_path.parent.mkdir(parents=True, exist_ok=True)
        with report_path.open('w') as fh:
            for record in summary.records:
                fh.write(record.model_dump_json() + '\n')
    logger.info(
        'verify_phase_complete',
        records=len(summary.records),
        violations=len(summary.violations),
        skipped=summary.skipped,
        _verbose_counts=summary.counts(),
    )
    return summary


__all__ = ['REPORT_FILENAME', 'SweepInstance', 'SweepSummary', 'evaluate_seed', 'run_sweep', 'sample_instance']
