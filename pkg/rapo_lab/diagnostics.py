"""Mechanism measurements on trained policies.

All measurements compare next-token laws at the emit positions of a
trajectory's generated steps. "Vision-blind" means every text query is
attention-masked from the vision prefix; positions are never removed, so
indexing matches the chain masks used in training.
"""

from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import pandas as pd
from hotlog import get_logger
from hotlog.live import maybe_live_logging
from scipy.special import entr

from rapo_lab.anchors import select_anchors
from rapo_lab.checkpoint import Checkpoint
from rapo_lab.errors import NoNextAnchor
from rapo_lab.models import AttentionMaskingRecord, NoiseRecord, PropagationRecord
from rapo_lab.objective import position_kl
from rapo_lab.policy import AttentionMaskSpec, PolicyParams, forward
from rapo_lab.rng import KeyedStreams
from rapo_lab.rollout import Trajectory, rollout_groups
from rapo_lab.task import SequenceLayout, TaskInstance, make_task_instance, reward

logger = get_logger(__name__)

Measure = Literal['profile', 'propagation', 'noise', 'concentration', 'attention']
MEASURES: tuple[Measure, ...] = ('profile', 'propagation', 'noise', 'concentration', 'attention')
NOISE_SIGMAS = (0.0, 0.1, 0.3, 1.0)
ENTROPY_QUANTILE = 0.2


@dataclass(frozen=True)
class KlProfile:
    """Contrastive KL per generated step (index ``t - 1``), in nats."""

    values: np.ndarray
    instance_id: int
    group_index: int
    correct: bool

    def __len__(self) -> int:
        return int(self.values.size)


def vision_blind_mask(layout: SequenceLayout, length: int) -> AttentionMaskSpec:
    return AttentionMaskSpec.block_keys(range(layout.n_vision, length), layout.vision_positions)


def _emit_positions(layout: SequenceLayout, length: int) -> np.ndarray:
    return np.array([layout.emit_position(t) for t in range(1, length + 1)], dtype=np.int64)


def _window_average(values: np.ndarray, w: int) -> np.ndarray:
    if w == 1:
        return values
    return np.array([values[i : i + w].mean() for i in range(values.size)])


def _contrastive_values(
    params: PolicyParams,
    trajectory: Trajectory,
    layout: SequenceLayout,
    history_mask: AttentionMaskSpec | None = None,
) -> np.ndarray:
    inputs = trajectory.model_input[None]
    length = inputs.shape[1]
    blind = vision_blind_mask(layout, length)
    if history_mask is not None:
        blind = blind.union(history_mask)
    seeing = forward(params, inputs, mask=history_mask).logits[0]
    blinded = forward(params, inputs, mask=blind).logits[0]
    positions = _emit_positions(layout, trajectory.length)
    return position_kl(seeing[positions], blinded[positions])


def contrastive_kl_profile(
    params: PolicyParams,
    trajectory: Trajectory,
    layout: SequenceLayout,
    w: int = 1,
) -> KlProfile:
    """KL(pi(.|H_t, V) || pi(.|H_t)) at every generated step.

    With ``w > 1`` each value is the mean over steps ``t .. t + w - 1``
    (clipped at the end of the trajectory).
    """
    if w < 1:
        msg = f'window must be at least 1, got {w}'
        raise ValueError(msg)
    values = _contrastive_values(params, trajectory, layout)
    return KlProfile(
        values=_window_average(values, w),
        instance_id=trajectory.instance_id,
        group_index=trajectory.group_index,
        correct=trajectory.reward > 0.0,
    )


def aggregate_profiles(profiles: Sequence[KlProfile]) -> pd.DataFrame:
    """Mean profile per step for all, correct and incorrect trajectories."""
    columns = ['stratum', 'position', 'mean_kl', 'count']
    rows = [
        {'position': t + 1, 'kl': float(value), 'correct': profile.correct}
        for profile in profiles
        for t, value in enumerate(profile.values)
    ]
    if not rows:
        return pd.DataFrame(columns=columns)
    frame = pd.DataFrame(rows)
    strata = {
        'all': frame,
        'correct': frame[frame['correct']],
        'incorrect': frame[~frame['correct']],
    }
    tables = []
    for name, part in strata.items():
        if part.empty:
            continue
        table = part.groupby('position')['kl'].agg(mean_kl='mean', count='count').reset_index()
        table.insert(0, 'stratum', name)
        tables.append(table)
    return pd.concat(tables, ignore_index=True)[columns]


def anchor_blind_mask(layout: SequenceLayout, anchor_step: int) -> AttentionMaskSpec:
    """Cut the vision access of one anchor's emit position only."""
    return AttentionMaskSpec.block_keys([layout.emit_position(anchor_step)], layout.vision_positions)


def next_anchor_delta_kl(
    before: np.ndarray,
    after: np.ndarray,
    anchors: Sequence[int],
    k: int,
) -> float:
    """Contrastive-KL change at the anchor following the k-th (1-based)."""
    if k >= len(anchors):
        msg = f'anchor {k} of {len(anchors)} has no successor'
        raise NoNextAnchor(msg)
    step = anchors[k]
    return float(after[step - 1] - before[step - 1])


def propagation_delta_kl(
    params: PolicyParams,
    trajectory: Trajectory,
    layout: SequenceLayout,
    anchors: Sequence[int],
    k: int,
    w: int = 3,
) -> PropagationRecord:
    """Downstream contrastive-KL change after blinding the k-th anchor.

    ``anchors`` are ascending 1-based steps and ``k`` is 1-based. The
    next-anchor delta is None on the last anchor; the window delta averages
    steps ``t_k + 1 .. t_k + w`` and is None when no step follows.
    """
    if not 1 <= k <= len(anchors):
        msg = f'anchor index {k} outside 1..{len(anchors)}'
        raise ValueError(msg)
    step = anchors[k - 1]
    before = _contrastive_values(params, trajectory, layout)
    after = _contrastive_values(params, trajectory, layout, anchor_blind_mask(layout, step))
    try:
        next_delta: float | None = next_anchor_delta_kl(before, after, anchors, k)
    except NoNextAnchor:
        next_delta = None
    following = slice(step, min(step + w, trajectory.length))
    deltas = after[following] - before[following]
    return PropagationRecord(
        instance_id=trajectory.instance_id,
        anchor_index=k,
        anchor_step=step,
        next_anchor_delta=next_delta,
        window_delta=float(deltas.mean()) if deltas.size else None,
    )


def noise_perturb_kl(
    params: PolicyParams,
    trajectory: Trajectory,
    layout: SequenceLayout,
    sigma: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """KL(clean || noised) per generated step with Gaussian noise on the vision embeddings."""
    if sigma < 0.0:
        msg = f'noise scale must be non-negative, got {sigma}'
        raise ValueError(msg)
    inputs = trajectory.model_input[None]
    offset = np.zeros((1, inputs.shape[1], params.config.d_model))
    offset[0, : layout.n_vision] = sigma * rng.standard_normal((layout.n_vision, params.config.d_model))
    clean = forward(params, inputs).logits[0]
    noised = forward(params, inputs, embed_offset=offset).logits[0]
    positions = _emit_positions(layout, trajectory.length)
    return position_kl(clean[positions], noised[positions])


def _entropy_extremes(entropies: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    count = max(1, int(np.floor(ENTROPY_QUANTILE * entropies.size)))
    order = np.argsort(-entropies, kind='stable')
    return order[:count], order[-count:]


def noise_sweep(
    params: PolicyParams,
    trajectories: Sequence[Trajectory],
    layout: SequenceLayout,
    sigmas: Sequence[float],
    streams: KeyedStreams,
) -> list[NoiseRecord]:
    """Noise KL per sigma, split by the trajectory's own entropy extremes."""
    records = []
    for trajectory in trajectories:
        high, low = _entropy_extremes(trajectory.entropies)
        for index, sigma in enumerate(sigmas):
            rng = streams.stream('noise', trajectory.instance_id, trajectory.group_index, index)
            values = noise_perturb_kl(params, trajectory, layout, sigma, rng)
            records.append(
                NoiseRecord(
                    instance_id=trajectory.instance_id,
                    sigma=float(sigma),
                    mean_kl=float(values.mean()),
                    mean_kl_high_entropy=float(values[high].mean()),
                    mean_kl_low_entropy=float(values[low].mean()),
                )
            )
    return records


def anchor_concentration(trajectories: Sequence[Trajectory], rho: float, min_count: int = 10) -> pd.DataFrame:
    """Fraction of each token type's occurrences picked as an anchor.

    Types seen fewer than ``min_count`` times are dropped; rows are sorted by
    descending fraction.
    """
    if not trajectories:
        msg = 'anchor concentration needs at least one trajectory'
        raise ValueError(msg)
    rows = []
    for trajectory in trajectories:
        anchors = set(select_anchors(trajectory.entropies, rho))
        rows.extend(
            {'token_type': int(token), 'anchored': t in anchors}
            for t, token in enumerate(trajectory.tokens, start=1)
        )
    frame = pd.DataFrame(rows)
    table = frame.groupby('token_type')['anchored'].agg(occurrences='count', anchor_fraction='mean').reset_index()
    table = table[table['occurrences'] >= min_count]
    table = table.sort_values(['anchor_fraction', 'token_type'], ascending=[False, True], kind='stable')
    return table.reset_index(drop=True)[['token_type', 'occurrences', 'anchor_fraction']]


def vision_attention_profile(params: PolicyParams, trajectory: Trajectory, layout: SequenceLayout) -> np.ndarray:
    """Attention mass on the vision prefix, shape (n_layers, T)."""
    result = forward(params, trajectory.model_input[None])
    positions = _emit_positions(layout, trajectory.length)
    vision = list(layout.vision_positions)
    return np.stack([attention[0][positions][:, vision].sum(axis=-1) for attention in result.attention])


@dataclass(frozen=True)
class _Decoded:
    tokens: np.ndarray
    truncated: bool
    entropies: np.ndarray


def _hide_keys(keys: Sequence[int], length: int) -> AttentionMaskSpec:
    """Block every later query from the given keys; each key still sees itself."""
    blocked = frozenset((query, key) for key in keys for query in range(key + 1, length))
    return AttentionMaskSpec(blocked)


def greedy_decode(
    params: PolicyParams,
    instances: Sequence[TaskInstance],
    hidden: Sequence[Sequence[int]] | None = None,
) -> list[_Decoded]:
    """Greedy continuations, optionally with some vision keys hidden per instance."""
    if not instances:
        return []
    prompt_length = instances[0].prompt_tokens.size
    horizon = instances[0].horizon
    steps = min(horizon, params.config.max_len - prompt_length + 1)
    sequences = np.stack([instance.prompt_tokens for instance in instances])
    hidden = hidden if hidden is not None else [()] * len(instances)
    entropies = np.zeros((len(instances), steps))
    for t in range(steps):
        length = sequences.shape[1]
        masks = [_hide_keys(keys, length) for keys in hidden]
        probs = forward(params, sequences, mask=masks).probs[:, -1, :]
        entropies[:, t] = entr(probs).sum(axis=-1)
        chosen = np.argmax(probs, axis=-1)
        sequences = np.concatenate([sequences, chosen[:, None]], axis=1)
    return [
        _Decoded(tokens=row[prompt_length:].copy(), truncated=steps < horizon, entropies=entropies[i].copy())
        for i, row in enumerate(sequences)
    ]


def _accuracy(instances: Sequence[TaskInstance], decoded: Sequence[_Decoded]) -> float:
    return float(np.mean([reward(instance, item) for instance, item in zip(instances, decoded, strict=True)]))


def attention_guided_masking(
    params: PolicyParams,
    instances: Sequence[TaskInstance],
    layout: SequenceLayout,
    fraction: float = 0.2,
    *,
    rho: float = 0.2,
    rng: np.random.Generator,
) -> AttentionMaskingRecord:
    """Accuracy drop from hiding the vision positions most attended at the first anchor.

    The control hides the same number of vision positions chosen uniformly
    at random. Decoding is greedy so only the hidden keys differ.
    """
    if not instances:
        msg = 'attention-guided masking needs at least one instance'
        raise ValueError(msg)
    count = max(1, round(fraction * layout.n_vision))
    baseline = greedy_decode(params, instances)
    guided, random_keys = [], []
    for instance, decoded in zip(instances, baseline, strict=True):
        anchors = select_anchors(decoded.entropies, rho) or (int(np.argmax(decoded.entropies)) + 1,)
        sequence = np.concatenate([instance.prompt_tokens, decoded.tokens])[:-1]
        result = forward(params, sequence[None])
        position = layout.emit_position(anchors[0])
        mass = np.mean([attention[0, position, : layout.n_vision] for attention in result.attention], axis=0)
        guided.append(tuple(sorted(int(i) for i in np.argsort(-mass, kind='stable')[:count])))
        random_keys.append(tuple(sorted(int(i) for i in rng.choice(layout.n_vision, size=count, replace=False))))
    record = AttentionMaskingRecord(
        instances=len(instances),
        fraction=fraction,
        masked_positions=count,
        baseline_accuracy=_accuracy(instances, baseline),
        attention_masked_accuracy=_accuracy(instances, greedy_decode(params, instances, guided)),
        random_masked_accuracy=_accuracy(instances, greedy_decode(params, instances, random_keys)),
    )
    logger.info(
        'attention_masking_complete',
        attention_drop=round(record.attention_drop, 4),
        random_drop=round(record.random_drop, 4),
    )
    return record


def _write_jsonl(path: Path, records: Sequence[NoiseRecord | PropagationRecord | AttentionMaskingRecord]) -> None:
    with path.open('w') as fh:
        for record in records:
            fh.write(record.model_dump_json() + '\n')


def run_diagnostics(
    ckpt: Checkpoint,
    measures: Sequence[Measure],
    out_dir: Path,
    *,
    instances: int,
    seed: int,
) -> dict[str, Path]:
    """Run the requested measures on fresh instances and write their tables.

    Returns the written files keyed by measure.
    """
    config = ckpt.config
    layout = SequenceLayout.from_config(config.task)
    streams = KeyedStreams(seed)
    tasks = [make_task_instance(streams.stream('diagnose', index), config.task, index) for index in range(instances)]
    groups = rollout_groups(ckpt.params, tasks, config.group_size, config.temperature, streams, 0) if tasks else []
    trajectories = [trajectory for group in groups for trajectory in group.trajectories]
    out_dir.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}

    logger.info('diagnose_phase_start', measures=list(measures), trajectories=len(trajectories))
    with maybe_live_logging('Running diagnostics...') as live:
        for measure in dict.fromkeys(measures):
            if live is not None:
                live.info('diagnose_measure', measure=measure)
            if measure == 'profile':
                profiles = [contrastive_kl_profile(ckpt.params, trajectory, layout) for trajectory in trajectories]
                path = out_dir / 'profiles.csv'
                aggregate_profiles(profiles).to_csv(path, index=False)
            elif measure == 'propagation':
                records = []
                for trajectory in trajectories:
                    anchors = select_anchors(trajectory.entropies, config.rho)
                    records.extend(
                        propagation_delta_kl(ckpt.params, trajectory, layout, anchors, k, config.window)
                        for k in range(1, len(anchors) + 1)
                    )
                violations = sum(
                    (record.next_anchor_delta or 0.0) > 0.0 or (record.window_delta or 0.0) > 0.0
                    for record in records
                )
                logger.info('propagation_measured', records=len(records), sign_violations=violations)
                path = out_dir / 'propagation.jsonl'
                _write_jsonl(path, records)
            elif measure == 'noise':
                path = out_dir / 'noise.jsonl'
                _write_jsonl(path, noise_sweep(ckpt.params, trajectories, layout, NOISE_SIGMAS, streams))
            elif measure == 'concentration':
                path = out_dir / 'concentration.csv'
                if trajectories:
                    table = anchor_concentration(trajectories, config.rho)
                else:
                    table = pd.DataFrame(columns=['token_type', 'occurrences', 'anchor_fraction'])
                table.to_csv(path, index=False)
            else:
                rows = [
                    {'layer': layer, 'position': t + 1, 'mass': float(mass)}
                    for trajectory in trajectories
                    for layer, masses in enumerate(vision_attention_profile(ckpt.params, trajectory, layout))
                    for t, mass in enumerate(masses)
                ]
                if rows:
                    table = pd.DataFrame(rows).groupby(['layer', 'position'])['mass'].mean().reset_index()
                else:
                    table = pd.DataFrame(columns=['layer', 'position', 'mass'])
                table.to_csv(out_dir / 'vision_attention.csv', index=False)
                path = out_dir / 'attention_masking.jsonl'
                if tasks:
                    rng = streams.stream('diagnose', instances, 1)
                    _write_jsonl(path, [attention_guided_masking(ckpt.params, tasks, layout, rho=config.rho, rng=rng)])
                else:
                    path.write_text('')
            written[measure] = path
    logger.info('diagnose_phase_complete', outputs={name: str(path) for name, path in written.items()})
    return written


__all__ = [
    'MEASURES',
    'NOISE_SIGMAS',
    'KlProfile',
    'Measure',
    'aggregate_profiles',
    'anchor_blind_mask',
    'anchor_concentration',
    'attention_guided_masking',
    'contrastive_kl_profile',
    'greedy_decode',
    'next_anchor_delta_kl',
    'noise_perturb_kl',
    'noise_sweep',
    'propagation_delta_kl',
    'run_diagnostics',
    'vision_attention_profile',
    'vision_blind_mask',
]
