"""Tiny enumerable worlds: explicit joint laws over (V, Y_1..Y_T).

A world is a dense table ``joint[v, y_1, ..., y_T]``. Conditioning on a
masked history fixes the unmasked prefix positions to their realized tokens
and sums the table over the masked positions.
"""

import enum
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from rapo_lab.dist import SUM_TOLERANCE, ProbabilityVector
from rapo_lab.errors import AbsoluteContinuityViolation, ZeroProbabilityHistory

MAX_VOCAB = 6
MAX_HORIZON = 3
MAX_VISUAL = 4


class Marginal(enum.Enum):
    """Sentinel for mixing over the visual posterior."""

    MARGINAL = 'marginal'


MARGINAL = Marginal.MARGINAL


@dataclass(frozen=True)
class WorldModel:
    """Explicit joint law p(v, y_1, ..., y_T) on tiny spaces."""

    joint: np.ndarray

    def __post_init__(self) -> None:
        joint = np.array(self.joint, dtype=np.float64)
        if joint.ndim < 2:
            msg = 'joint needs a visual axis and at least one token axis'
            raise ValueError(msg)
        vocab = joint.shape[1]
        if any(size != vocab for size in joint.shape[1:]):
            msg = f'all token axes must share one vocabulary size, got {joint.shape[1:]}'
            raise ValueError(msg)
        if np.any(joint < 0.0) or not np.all(np.isfinite(joint)):
            msg = 'joint entries must be finite and non-negative'
            raise ValueError(msg)
        if abs(joint.sum() - 1.0) > SUM_TOLERANCE:
            msg = f'joint sums to {joint.sum():.15f}, expected 1'
            raise ValueError(msg)
        joint.setflags(write=False)
        object.__setattr__(self, 'joint', joint)

    @property
    def n_visual(self) -> int:
        return int(self.joint.shape[0])

    @property
    def vocab(self) -> int:
        return int(self.joint.shape[1])

    @property
    def horizon(self) -> int:
        return int(self.joint.ndim - 1)

    @property
    def prior(self) -> np.ndarray:
        return self.joint.reshape(self.n_visual, -1).sum(axis=1)

    @classmethod
    def random(
        cls,
        rng: np.random.Generator,
        *,
        n_visual: int,
        vocab: int,
        horizon: int,
        concentration: float = 1.0,
    ) -> 'WorldModel':
        """Strictly positive world built from Dirichlet conditionals."""
        _check_caps(n_visual=n_visual, vocab=vocab, horizon=horizon)
        joint = rng.dirichlet(np.full(n_visual, concentration))
        for _ in range(horizon):
            contexts = joint.size
            conditionals = rng.dirichlet(np.full(vocab, concentration), size=contexts)
            joint = joint.reshape(-1, 1) * conditionals
        joint = joint.reshape((n_visual,) + (vocab,) * horizon)
        return cls(joint / joint.sum())

    @classmethod
    def independent(cls, prior: np.ndarray, token_law: np.ndarray) -> 'WorldModel':
        """World in which Y is independent of V."""
        prior = np.asarray(prior, dtype=np.float64)
        token_law = np.asarray(token_law, dtype=np.float64)
        joint = np.multiply.outer(prior / prior.sum(), token_law / token_law.sum())
        return cls(joint / joint.sum())

    @classmethod
    def copy_channel(cls, prior: np.ndarray, horizon: int = 1) -> 'WorldModel':
        """y_1 = v deterministically; later tokens uniform and independent."""
        prior = np.asarray(prior, dtype=np.float64)
        n_visual = prior.size
        first = np.diag(prior / prior.sum())
        joint = first
        for _ in range(horizon - 1):
            joint = np.multiply.outer(joint, np.full(n_visual, 1.0 / n_visual))
        return cls(joint)

    def sample_trajectory(self, rng: np.random.Generator) -> tuple[int, tuple[int, ...]]:
        """Draw (v, y_1..y_T) from the joint."""
        flat = rng.choice(self.joint.size, p=self.joint.ravel())
        index = np.unravel_index(flat, self.joint.shape)
        return int(index[0]), tuple(int(i) for i in index[1:])


def _check_caps(*, n_visual: int, vocab: int, horizon: int) -> None:
    if not 1 <= n_visual <= MAX_VISUAL:
        msg = f'n_visual must be in [1, {MAX_VISUAL}], got {n_visual}'
        raise ValueError(msg)
    if not 2 <= vocab <= MAX_VOCAB:
        msg = f'vocab must be in [2, {MAX_VOCAB}], got {vocab}'
        raise ValueError(msg)
    if not 1 <= horizon <= MAX_HORIZON:
        msg = f'horizon must be in [1, {MAX_HORIZON}], got {horizon}'
        raise ValueError(msg)


@dataclass(frozen=True)
class MaskedHistory:
    """A realized prefix y_<t with some earlier positions masked out.

    Positions are 1-based, so the history for step t has ``t - 1`` tokens and
    masked positions live in ``{1, ..., t - 1}``.
    """

    realized_prefix: tuple[int, ...]
    masked_positions: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        object.__setattr__(self, 'realized_prefix', tuple(int(y) for y in self.realized_prefix))
        object.__setattr__(self, 'masked_positions', frozenset(int(p) for p in self.masked_positions))
        bad = [p for p in self.masked_positions if not 1 <= p <= len(self.realized_prefix)]
        if bad:
            msg = f'masked positions {sorted(bad)} outside 1..{len(self.realized_prefix)}'
            raise ValueError(msg)

    @property
    def t(self) -> int:
        return len(self.realized_prefix) + 1


@dataclass(frozen=True)
class SuffixLaw:
    """Explicit distribution over suffixes (y_t, ..., y_T)."""

    table: np.ndarray

    def __post_init__(self) -> None:
        table = np.array(self.table, dtype=np.float64)
        if abs(table.sum() - 1.0) > SUM_TOLERANCE:
            msg = f'suffix law sums to {table.sum():.15f}, expected 1'
            raise ValueError(msg)
        table.setflags(write=False)
        object.__setattr__(self, 'table', table)

    @property
    def first_token(self) -> ProbabilityVector:
        return ProbabilityVector(self.table.reshape(self.table.shape[0], -1).sum(axis=1))

    def continuation(self, y: int) -> np.ndarray:
        """Flattened law of y_>t given y_t = y."""
        row = self.table[y].reshape(-1)
        return row / row.sum()


def _suffix_table(world: WorldModel, mh: MaskedHistory) -> np.ndarray:
    """Joint mass of (v, y_t..y_T) with masked prefix positions summed out."""
    if mh.t > world.horizon:
        msg = f'history for step {mh.t} exceeds horizon {world.horizon}'
        raise ValueError(msg)
    index: list[int | slice] = [slice(None)]
    for position, token in enumerate(mh.realized_prefix, start=1):
        index.append(slice(None) if position in mh.masked_positions else token)
    table = world.joint[tuple(index)]
    n_masked = len(mh.masked_positions)
    if n_masked:
        table = table.sum(axis=tuple(range(1, 1 + n_masked)))
    return table


@dataclass(frozen=True)
class MaskedView:
    """Every law the theory needs for one (world, masked history) pair.

    Arrays are indexed ``[v, y_t, rest]`` where ``rest`` flattens y_t+1..y_T
    (length 1 when t = T).
    """

    world: WorldModel
    history: MaskedHistory
    posterior: np.ndarray
    suffix: np.ndarray
    reference: np.ndarray
    full_suffix: np.ndarray

    @classmethod
    def build(cls, world: WorldModel, mh: MaskedHistory) -> 'MaskedView':
        table = _suffix_table(world, mh)
        n_visual, vocab = world.n_visual, world.vocab
        flat = table.reshape(n_visual, vocab, -1)
        mass = flat.reshape(n_visual, -1).sum(axis=1)
        total = mass.sum()
        if total <= 0.0:
            msg = f'masked history {mh.realized_prefix} (masked {sorted(mh.masked_positions)}) has zero mass'
            raise ZeroProbabilityHistory(msg)
        posterior = mass / total
        safe = np.where(mass > 0.0, mass, 1.0)
        suffix = flat / safe[:, None, None]
        reference = flat.sum(axis=0) / total

        full = _suffix_table(world, MaskedHistory(mh.realized_prefix)).reshape(n_visual, vocab, -1)
        full_mass = full.reshape(n_visual, -1).sum(axis=1)
        full_suffix = full / np.where(full_mass > 0.0, full_mass, 1.0)[:, None, None]
        return cls(
            world=world,
            history=mh,
            posterior=posterior,
            suffix=suffix,
            reference=reference,
            full_suffix=full_suffix,
        )

    @property
    def active(self) -> np.ndarray:
        """Visual states with positive posterior mass."""
        return self.posterior > 0.0

    @cached_property
    def next_token(self) -> np.ndarray:
        """m_{t,v}(y) for every v, shape (n_visual, vocab)."""
        return self.suffix.sum(axis=2)

    @cached_property
    def reference_next_token(self) -> np.ndarray:
        """m_{M,t}(y), the posterior mixture of the next-token laws."""
        return self.reference.sum(axis=1)

    def require_active(self, v: int) -> None:
        if not 0 <= v < self.world.n_visual:
            msg = f'visual state {v} outside 0..{self.world.n_visual - 1}'
            raise ValueError(msg)
        if self.posterior[v] <= 0.0:
            msg = f'visual state {v} has zero posterior under history {self.history.realized_prefix}'
            raise ZeroProbabilityHistory(msg)

    def continuation(self, v: int) -> np.ndarray:
        """K_{t,v}(rest | y), shape (vocab, rest); rows with m = 0 are zero."""
        m = self.next_token[v]
        safe = np.where(m > 0.0, m, 1.0)
        return self.suffix[v] / safe[:, None]

    def intervened_suffix(self, q: np.ndarray) -> np.ndarray:
        """q_v(y) * K_{t,v}(rest | y) for every v, shape (n_visual, vocab, rest)."""
        q = np.asarray(q, dtype=np.float64)
        expected = (self.world.n_visual, self.world.vocab)
        if q.shape != expected:
            msg = f'intervention shape {q.shape} does not match {expected}'
            raise ValueError(msg)
        offending = (q > 0.0) & (self.next_token <= 0.0) & self.active[:, None]
        if np.any(offending):
            v, y = (int(i) for i in np.argwhere(offending)[0])
            msg = f'intervention puts mass on token {y} for v={v} where the native law has none'
            raise AbsoluteContinuityViolation(msg)
        out = np.zeros_like(self.suffix)
        for v in np.flatnonzero(self.active):
            out[v] = q[v][:, None] * self.continuation(v)
        return out

    def native_intervention(self) -> np.ndarray:
        return self.next_token.copy()

    def _suffix_shape(self) -> tuple[int, ...]:
        return (self.world.vocab,) * (self.world.horizon - self.history.t + 1)

    def suffix_law(self, v: int) -> SuffixLaw:
        """p~_(t,v), the masked-history suffix law under visual state v."""
        self.require_active(v)
        return SuffixLaw(self.suffix[v].reshape(self._suffix_shape()))

    def reference_law(self) -> SuffixLaw:
        """p_(M,t), the suffix law mixed over the visual posterior."""
        return SuffixLaw(self.reference.reshape(self._suffix_shape()))


def condition_masked(
    world: WorldModel,
    mh: MaskedHistory,
    v: int | Marginal,
) -> ProbabilityVector:
    """Next-token law given the unmasked prefix, optionally mixed over V."""
    view = MaskedView.build(world, mh)
    if v is MARGINAL:
        return ProbabilityVector(view.reference_next_token)
    view.require_active(int(v))
    return ProbabilityVector(view.next_token[int(v)])


__all__ = [
    'MARGINAL',
    'MAX_HORIZON',
    'MAX_VISUAL',
    'MAX_VOCAB',
    'Marginal',
    'MaskedHistory',
    'MaskedView',
    'SuffixLaw',
    'WorldModel',
    'condition_masked',
]
