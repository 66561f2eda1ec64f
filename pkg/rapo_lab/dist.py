"""Finite-distribution arithmetic: entropy, KL, tilting and tilt solving.

Everything here works in nats on dense numpy vectors. Zero-mass entries are
excluded from entropy and KL sums (0 * log 0 = 0), so point masses are legal
inputs everywhere.
"""

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq
from scipy.special import entr, logsumexp, rel_entr

from rapo_lab.errors import AbsoluteContinuityViolation, DegenerateScore

PROB_FLOOR = 1e-12
SUM_TOLERANCE = 1e-12
KL_TOLERANCE = 1e-9
_LN2 = math.log(2.0)
_MAX_BRACKET_DOUBLINGS = 200


@dataclass(frozen=True)
class ProbabilityVector:
    """A finite discrete distribution over a token vocabulary."""

    probs: np.ndarray

    def __post_init__(self) -> None:
        probs = np.array(self.probs, dtype=np.float64).reshape(-1)
        if probs.size == 0:
            msg = 'distribution must have at least one entry'
            raise ValueError(msg)
        if not np.all(np.isfinite(probs)) or np.any(probs < 0.0):
            msg = 'distribution entries must be finite and non-negative'
            raise ValueError(msg)
        total = probs.sum()
        if total <= 0.0:
            msg = 'distribution has zero total mass'
            raise ValueError(msg)
        if abs(total - 1.0) > SUM_TOLERANCE:
            probs = probs / total
        probs.setflags(write=False)
        object.__setattr__(self, 'probs', probs)

    @classmethod
    def from_logits(
        cls,
        logits: np.ndarray,
        floor: float = PROB_FLOOR,
    ) -> 'ProbabilityVector':
        """Softmax with entries below ``floor`` clamped to zero."""
        logits = np.asarray(logits, dtype=np.float64)
        probs = np.exp(logits - logsumexp(logits))
        probs[probs < floor] = 0.0
        return cls(probs)

    @classmethod
    def uniform(cls, size: int) -> 'ProbabilityVector':
        return cls(np.full(size, 1.0 / size))

    @classmethod
    def point_mass(cls, size: int, index: int) -> 'ProbabilityVector':
        probs = np.zeros(size)
        probs[index] = 1.0
        return cls(probs)

    def __len__(self) -> int:
        return int(self.probs.size)

    @property
    def support(self) -> np.ndarray:
        return self.probs > 0.0

    def log_probs(self) -> np.ndarray:
        """Log-probabilities with -inf on zero-mass entries."""
        out = np.full(self.probs.shape, -np.inf)
        support = self.support
        out[support] = np.log(self.probs[support])
        return out

    def expectation(self, values: np.ndarray) -> float:
        values = np.asarray(values, dtype=np.float64)
        support = self.support
        return float(np.dot(self.probs[support], values[support]))


@dataclass(frozen=True)
class ScoreVector:
    """Real scores in nats aligned to a distribution's entries."""

    scores: np.ndarray

    def __post_init__(self) -> None:
        scores = np.array(self.scores, dtype=np.float64).reshape(-1)
        scores.setflags(write=False)
        object.__setattr__(self, 'scores', scores)

    def __len__(self) -> int:
        return int(self.scores.size)


ScoreLike = ScoreVector | Sequence[float] | np.ndarray


@dataclass(frozen=True)
class TiltSolution:
    """Result of solving for the tilt that sits on a KL radius."""

    q: ProbabilityVector
    eta: float
    kl: float
    degenerate: bool = False
    saturated: bool = False


def _scores_for(m: ProbabilityVector, psi: ScoreLike) -> np.ndarray:
    scores = psi.scores if isinstance(psi, ScoreVector) else np.asarray(psi, dtype=np.float64)
    if scores.shape != m.probs.shape:
        msg = f'score length {scores.size} does not match distribution length {len(m)}'
        raise ValueError(msg)
    return scores


def entropy(p: ProbabilityVector) -> float:
    """Shannon entropy in nats."""
    return float(entr(p.probs).sum())


def kl(p: ProbabilityVector, q: ProbabilityVector) -> float:
    """KL(p || q) in nats."""
    if len(p) != len(q):
        msg = f'length mismatch: {len(p)} vs {len(q)}'
        raise ValueError(msg)
    offending = p.support & ~q.support
    if np.any(offending):
        index = int(np.flatnonzero(offending)[0])
        msg = f'p has mass {p.probs[index]:.3e} at index {index} where q has none'
        raise AbsoluteContinuityViolation(msg)
    return max(float(rel_entr(p.probs, q.probs).sum()), 0.0)


def branching_room_weight(h: float) -> float:
    """(e^h - 2)_+, zero on [0, ln 2]."""
    if h <= _LN2:
        return 0.0
    return max(math.exp(h) - 2.0, 0.0)


def mix(weights: Sequence[float] | np.ndarray, dists: Sequence[ProbabilityVector]) -> ProbabilityVector:
    """Convex combination of distributions."""
    weights = np.asarray(weights, dtype=np.float64)
    stacked = np.stack([d.probs for d in dists])
    return ProbabilityVector(weights @ stacked)


def exp_tilt(m: ProbabilityVector, psi: ScoreLike, eta: float) -> ProbabilityVector:
    """q(y) proportional to m(y) * exp(eta * psi(y)) on m's support."""
    scores = _scores_for(m, psi)
    if eta == 0.0:
        return m
    support = m.support
    logits = np.full(scores.shape, -np.inf)
    logits[support] = np.log(m.probs[support]) + eta * scores[support]
    probs = np.zeros(scores.shape)
    probs[support] = np.exp(logits[support] - logsumexp(logits[support]))
    return ProbabilityVector(probs)


def log_partition(m: ProbabilityVector, psi: ScoreLike, eta: float) -> tuple[float, float, float]:
    """Log-partition of the centred score and its first two derivatives.

    Returns:
        (Lambda, Lambda', Lambda'') at ``eta`` for psi - E_m[psi].
    """
    scores = _scores_for(m, psi)
    support = m.support
    centred = scores[support] - m.expectation(scores)
    log_m = np.log(m.probs[support])
    lam = float(logsumexp(log_m + eta * centred))
    weights = np.exp(log_m + eta * centred - lam)
    first = float(np.dot(weights, centred))
    second = float(np.dot(weights, (centred - first) ** 2))
    return lam, first, second


def first_order_gain(q: ProbabilityVector, m: ProbabilityVector, psi: ScoreLike) -> float:
    """Sum over y of (q(y) - m(y)) * psi(y)."""
    scores = _scores_for(m, psi)
    support = q.support | m.support
    return float(np.dot(q.probs[support] - m.probs[support], scores[support]))


def saturation_point(m: ProbabilityVector, psi: ScoreLike) -> tuple[ProbabilityVector, float]:
    """The eta -> infinity limit of the tilt and its KL from m."""
    scores = _scores_for(m, psi)
    support = m.support
    top = scores[support].max()
    argmax = support & (scores >= top)
    probs = np.where(argmax, m.probs, 0.0)
    mass = probs.sum()
    return ProbabilityVector(probs / mass), -math.log(mass)


def _is_degenerate(m: ProbabilityVector, scores: np.ndarray) -> bool:
    values = scores[m.support]
    return bool(values.max() - values.min() <= 1e-15 * max(1.0, np.abs(values).max()))


def solve_tilt_for_radius(
    m: ProbabilityVector,
    psi: ScoreLike,
    epsilon: float,
    *,
    strict: bool = False,
) -> TiltSolution:
    """Find the tilt of m along psi whose KL from m equals epsilon.

    Args:
        m: Base distribution.
        psi: Score to tilt along.
        epsilon: Target KL radius, strictly positive.
        strict: Raise DegenerateScore instead of returning m when psi is
            constant on m's support.

    Returns:
        The tilted distribution together with its eta. If the radius is at
        or beyond the saturation KL the argmax-restricted limit is returned
        with ``eta = inf``.
    """
    if epsilon <= 0.0:
        msg = f'epsilon must be positive, got {epsilon}'
        raise ValueError(msg)
    scores = _scores_for(m, psi)
    if _is_degenerate(m, scores):
        if strict:
            msg = 'score is constant on the support of m'
            raise DegenerateScore(msg)
        return TiltSolution(q=m, eta=0.0, kl=0.0, degenerate=True)

    q_sat, kl_sat = saturation_point(m, scores)
    if epsilon >= kl_sat:
        return TiltSolution(q=q_sat, eta=math.inf, kl=kl_sat, saturated=True)

    def gap(eta: float) -> float:
        return kl(exp_tilt(m, scores, eta), m) - epsilon

    upper = 1.0
    for _ in range(_MAX_BRACKET_DOUBLINGS):
        if gap(upper) >= 0.0:
            break
        upper *= 2.0
    else:
        msg = f'could not bracket radius {epsilon} below saturation {kl_sat}'
        raise RuntimeError(msg)

    eta = brentq(gap, 0.0, upper, xtol=1e-15, rtol=4.0 * np.finfo(float).eps, maxiter=500)
    q = exp_tilt(m, scores, eta)
    return TiltSolution(q=q, eta=float(eta), kl=kl(q, m))


__all__ = [
    'KL_TOLERANCE',
    'PROB_FLOOR',
    'ProbabilityVector',
    'ScoreVector',
    'TiltSolution',
    'branching_room_weight',
    'entropy',
    'exp_tilt',
    'first_order_gain',
    'kl',
    'log_partition',
    'mix',
    'saturation_point',
    'solve_tilt_for_radius',
]
