"""Brute-force oracles for the downstream visual gain and its lower bounds.

All quantities are evaluated by full enumeration over a
:class:`~rapo_lab.world.MaskedView`. The closed forms are checked against
direct evaluation wherever two routes to the same number exist.
"""

import enum
import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.special import entr, rel_entr

from rapo_lab.dist import ProbabilityVector, first_order_gain, solve_tilt_for_radius
from rapo_lab.errors import AssumptionViolated, IdentityViolation, ZeroProbabilityHistory
from rapo_lab.world import MaskedHistory, MaskedView, WorldModel

IDENTITY_TOLERANCE = 1e-10
BOUND_SLACK = 1e-9
EXHAUSTIVE_TOPK_LIMIT = 12
D0 = 8.0 / 3.0
TILT_RADIUS_FRACTIONS = (0.25, 0.5, 1.0)


class Native(enum.Enum):
    """Sentinel for the un-intervened next-token law."""

    NATIVE = 'native'


NATIVE = Native.NATIVE

Intervention = np.ndarray | Native


def _psi_direct(view: MaskedView, v: int) -> np.ndarray:
    """E_{K(.|y)}[log p~/p_M] by enumeration; zero off m's support."""
    m = view.next_token[v]
    weighted = rel_entr(view.suffix[v], view.reference).sum(axis=1)
    return np.where(m > 0.0, weighted / np.where(m > 0.0, m, 1.0), 0.0)


def _psi_closed_form(view: MaskedView, v: int) -> np.ndarray:
    """log(m / m_M) + KL(K(.|y) || p_M(.|y)); zero off m's support."""
    m = view.next_token[v]
    m_ref = view.reference_next_token
    support = m > 0.0
    out = np.zeros_like(m)
    continuation = view.continuation(v)
    ref_continuation = view.reference / np.where(m_ref > 0.0, m_ref, 1.0)[:, None]
    for y in np.flatnonzero(support):
        gap = rel_entr(continuation[y], ref_continuation[y]).sum()
        out[y] = math.log(m[y] / m_ref[y]) + gap
    return out


def psi_vector(view: MaskedView, v: int) -> np.ndarray:
    """psi(v, .) over the vocabulary, checked against its closed form."""
    view.require_active(v)
    direct = _psi_direct(view, v)
    closed = _psi_closed_form(view, v)
    support = view.next_token[v] > 0.0
    gap = np.abs(direct - closed)[support]
    if gap.size and gap.max() > IDENTITY_TOLERANCE:
        msg = f'psi direct and closed form differ by {gap.max():.3e} at v={v}'
        raise IdentityViolation(msg)
    return direct


def psi_path_gap(view: MaskedView) -> float:
    """Largest disagreement between the two psi evaluations over active states."""
    worst = 0.0
    for v in np.flatnonzero(view.active):
        support = view.next_token[v] > 0.0
        gap = np.abs(_psi_direct(view, int(v)) - _psi_closed_form(view, int(v)))[support]
        if gap.size:
            worst = max(worst, float(gap.max()))
    return worst


def psi_matrix(view: MaskedView) -> np.ndarray:
    """psi for every active visual state, shape (n_visual, vocab)."""
    out = np.zeros((view.world.n_visual, view.world.vocab))
    for v in np.flatnonzero(view.active):
        out[v] = psi_vector(view, int(v))
    return out


def psi_score(world: WorldModel, mh: MaskedHistory, v: int, y: int) -> float:
    """Downstream visual score of emitting token y under visual state v."""
    view = MaskedView.build(world, mh)
    view.require_active(v)
    if view.next_token[v, y] <= 0.0:
        msg = f'token {y} has zero probability under m_(t,{v})'
        raise ZeroProbabilityHistory(msg)
    return float(psi_vector(view, v)[y])


def _resolve(view: MaskedView, q: Intervention) -> np.ndarray:
    if q is NATIVE:
        return view.native_intervention()
    q = np.asarray(q, dtype=np.float64)
    rows = q.sum(axis=1)
    bad = view.active & (np.abs(rows - 1.0) > 1e-9)
    if np.any(bad):
        msg = f'intervention rows must be distributions, got sums {rows[bad]}'
        raise ValueError(msg)
    return q


def _mutual_information(view: MaskedView, q: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    suffix = view.intervened_suffix(q)
    reference = np.tensordot(view.posterior, suffix, axes=1)
    per_v = rel_entr(suffix, reference[None]).reshape(view.world.n_visual, -1).sum(axis=1)
    return float(np.dot(view.posterior, per_v)), suffix, reference


def mi_identity_gap(view: MaskedView, psi: np.ndarray | None = None) -> float:
    """|native MI - E_V E_m[psi]|."""
    psi = psi_matrix(view) if psi is None else psi
    mi, _, _ = _mutual_information(view, view.native_intervention())
    identity = float(np.dot(view.posterior, (view.next_token * psi).sum(axis=1)))
    return abs(identity - mi)


def mi_from_view(view: MaskedView, q: Intervention = NATIVE) -> float:
    """I(V; Y_>=t | masked history) under the one-step-then-rollback law."""
    mi, _, _ = _mutual_information(view, _resolve(view, q))
    if q is NATIVE:
        gap = mi_identity_gap(view)
        if gap > IDENTITY_TOLERANCE:
            msg = f'native MI {mi:.15f} differs from its psi expectation by {gap:.3e}'
            raise IdentityViolation(msg)
    return mi


def mi_downstream(world: WorldModel, mh: MaskedHistory, q: Intervention = NATIVE) -> float:
    return mi_from_view(MaskedView.build(world, mh), q)


def delta_gain(world: WorldModel, mh: MaskedHistory, q: Intervention) -> float:
    """Gain in downstream MI from intervening with q at step t."""
    view = MaskedView.build(world, mh)
    return mi_from_view(view, q) - mi_from_view(view, NATIVE)


@dataclass(frozen=True)
class DecompositionTerms:
    """The pieces of the exact first-order decomposition of the gain."""

    delta: float
    first_order: float
    local_kl: float
    reference_kl: float

    @property
    def residual(self) -> float:
        return self.delta - (self.first_order + self.local_kl - self.reference_kl)


def decomposition_terms(view: MaskedView, q: Intervention, psi: np.ndarray | None = None) -> DecompositionTerms:
    q_arr = _resolve(view, q)
    psi = psi_matrix(view) if psi is None else psi
    mi_q, _, reference_q = _mutual_information(view, q_arr)
    mi_native, _, _ = _mutual_information(view, view.native_intervention())
    m = view.next_token
    active = view.active
    first_order = float(np.dot(view.posterior[active], ((q_arr - m) * psi)[active].sum(axis=1)))
    local = rel_entr(q_arr[active], m[active]).sum(axis=1)
    local_kl = float(np.dot(view.posterior[active], local))
    reference_kl = float(rel_entr(reference_q, view.reference).sum())
    return DecompositionTerms(
        delta=mi_q - mi_native,
        first_order=first_order,
        local_kl=local_kl,
        reference_kl=reference_kl,
    )


def first_order_gain_oracle(world: WorldModel, mh: MaskedHistory, q: Intervention) -> float:
    return decomposition_terms(MaskedView.build(world, mh), q).first_order


def verify_exact_decomposition(world: WorldModel, mh: MaskedHistory, q: Intervention) -> float:
    """Residual of delta - [G1 + E_V KL(q||m) - KL(p_M^q || p_M)]."""
    return decomposition_terms(MaskedView.build(world, mh), q).residual


def tilted_intervention(view: MaskedView, epsilon: float, psi: np.ndarray | None = None) -> np.ndarray:
    """Per-state optimal first-order tilt of m_(t,v) at KL radius epsilon."""
    psi = psi_matrix(view) if psi is None else psi
    q = view.native_intervention()
    for v in np.flatnonzero(view.active):
        solution = solve_tilt_for_radius(ProbabilityVector(view.next_token[v]), psi[v], epsilon)
        q[v] = solution.q.probs
    return q


def point_mass_intervention(view: MaskedView, psi: np.ndarray | None = None) -> np.ndarray:
    """Per-state point mass on the supported argmax of psi."""
    psi = psi_matrix(view) if psi is None else psi
    q = view.native_intervention()
    for v in np.flatnonzero(view.active):
        scores = np.where(view.next_token[v] > 0.0, psi[v], -np.inf)
        q[v] = 0.0
        q[v, int(np.argmax(scores))] = 1.0
    return q


def random_feasible_cloud(
    m: np.ndarray,
    epsilon: float,
    rng: np.random.Generator,
    count: int,
    max_rounds: int = 32,
) -> np.ndarray:
    """``count`` random points of the ball {q : KL(q || m) <= epsilon}, one per row.

    Candidates are Dirichlet draws centred on m whose concentration puts the
    expected divergence at a random fraction of epsilon; draws that land
    outside the ball are rejected. Rows still unfilled after ``max_rounds``
    batches are m itself.
    """
    cloud = np.tile(m, (count, 1))
    support = m > 0.0
    size = int(support.sum())
    if size < 2 or count == 0:
        return cloud
    base = m[support]
    filled = 0
    for _ in range(max_rounds):
        batch = 2 * (count - filled)
        targets = epsilon * rng.uniform(0.05, 1.0, size=batch)
        draws = rng.gamma(base[None, :] * ((size - 1) / (2.0 * targets))[:, None])
        totals = draws.sum(axis=1)
        candidates = draws[totals > 0.0] / totals[totals > 0.0, None]
        inside = candidates[rel_entr(candidates, base[None, :]).sum(axis=1) <= epsilon]
        take = inside[: count - filled]
        cloud[filled : filled + len(take), support] = take
        filled += len(take)
        if filled == count:
            break
    return cloud


def random_feasible_intervention(view: MaskedView, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    """A random point of every per-state KL ball around m_(t,v)."""
    q = view.native_intervention()
    for v in np.flatnonzero(view.active):
        q[v] = random_feasible_cloud(view.next_token[v], epsilon, rng, 1)[0]
    return q


@dataclass(frozen=True)
class InstanceConstants:
    """Assumption constants of one (world, masked history) instance."""

    b_bound: float
    gamma_sep: float
    log_ratio_max: float
    reference_gap_max: float

    @property
    def c_b(self) -> float:
        return 2.0 * (2.0 * self.b_bound) * max(D0 + 1.0, D0)


def check_assumptions(
    view: MaskedView,
    psi: np.ndarray,
    *,
    gamma_sep: float | None = None,
    b_bound: float | None = None,
) -> InstanceConstants:
    """Verify support, bounded-ratio and non-coincidence assumptions.

    Raises:
        AssumptionViolated: naming ``support``, ``bounded-ratio`` or
            ``generic-non-coincidence``.
    """
    active = view.active
    suffix = view.suffix[active]
    full = view.full_suffix[active]
    reference = view.reference[None]
    if np.any((suffix > 0.0) & (reference <= 0.0)) or np.any((full > 0.0) & (reference <= 0.0)):
        raise AssumptionViolated('support', 'a suffix law is not absolutely continuous w.r.t. the reference')
    if np.any(full.reshape(full.shape[0], -1).sum(axis=1) <= 0.0):
        raise AssumptionViolated('support', 'full history has zero mass under an active visual state')

    positive = suffix > 0.0
    ratios = np.log(suffix[positive] / np.broadcast_to(reference, suffix.shape)[positive])
    log_ratio_max = float(np.abs(ratios).max()) if ratios.size else 0.0
    gaps = rel_entr(full, reference).reshape(full.shape[0], -1).sum(axis=1)
    reference_gap_max = float(gaps.max()) if gaps.size else 0.0
    bound = max(log_ratio_max, reference_gap_max)
    if b_bound is not None:
        if bound > b_bound + BOUND_SLACK:
            msg = f'instance needs B >= {bound:.6g}, supplied {b_bound:.6g}'
            raise AssumptionViolated('bounded-ratio', msg)
        bound = b_bound

    min_gap = math.inf
    for v in np.flatnonzero(active):
        values = np.sort(psi[v][view.next_token[v] > 0.0])
        if values.size < 2:
            continue
        gap = float(np.diff(values).min())
        if gap <= 1e-12:
            msg = f'psi is not injective on the support of m_(t,{v})'
            raise AssumptionViolated('generic-non-coincidence', msg)
        min_gap = min(min_gap, gap)
    if gamma_sep is not None:
        if min_gap < gamma_sep:
            msg = f'psi gap {min_gap:.6g} below required separation {gamma_sep:.6g}'
            raise AssumptionViolated('generic-non-coincidence', msg)
        min_gap = gamma_sep
    if math.isinf(min_gap):
        min_gap = 1.0
    return InstanceConstants(
        b_bound=bound,
        gamma_sep=min_gap,
        log_ratio_max=log_ratio_max,
        reference_gap_max=reference_gap_max,
    )


@dataclass(frozen=True)
class BoundCheck:
    """One inequality lhs >= rhs evaluated on an instance."""

    inequality: str
    lhs: float
    rhs: float

    @property
    def margin(self) -> float:
        return self.lhs - self.rhs

    @property
    def satisfied(self) -> bool:
        return self.margin >= -BOUND_SLACK


@dataclass(frozen=True)
class BoundReport:
    """Gain lower-bound checks for one instance and radius."""

    epsilon: float
    constants: InstanceConstants
    checks: tuple[BoundCheck, ...] = field(default_factory=tuple)
    delta_star_source: str = 'native'

    @property
    def satisfied(self) -> bool:
        return all(check.satisfied for check in self.checks)


def _entropy_gap_factor(view: MaskedView, constants: InstanceConstants) -> float:
    """E_V[(e^H(m) - 2)_+ * sqrt(KL(p_(t,V) || p_M))] scaled by 1/sqrt(B)."""
    if constants.b_bound <= 0.0:
        return 0.0
    total = 0.0
    for v in np.flatnonzero(view.active):
        room = math.exp(float(entr(view.next_token[v]).sum())) - 2.0
        if room <= 0.0:
            continue
        gap = float(rel_entr(view.full_suffix[v], view.reference).sum())
        total += view.posterior[v] * room * math.sqrt(max(gap, 0.0) / constants.b_bound)
    return total


def search_delta_star(
    view: MaskedView,
    epsilon: float,
    rng: np.random.Generator,
    *,
    psi: np.ndarray | None = None,
    cloud_size: int = 16,
) -> tuple[float, str]:
    """Best gain over the tilt family, a random feasible cloud and native."""
    psi = psi_matrix(view) if psi is None else psi
    best, source = 0.0, 'native'
    candidates: list[tuple[str, np.ndarray]] = [
        (f'tilt@{fraction:g}', tilted_intervention(view, epsilon * fraction, psi)) for fraction in TILT_RADIUS_FRACTIONS
    ]
    candidates.extend(('cloud', random_feasible_intervention(view, epsilon, rng)) for _ in range(cloud_size))
    mi_native, _, _ = _mutual_information(view, view.native_intervention())
    for name, q in candidates:
        mi_q, _, _ = _mutual_information(view, q)
        gain = mi_q - mi_native
        if gain > best:
            best, source = gain, name
    return best, source


def verify_gain_bounds(
    world: WorldModel,
    mh: MaskedHistory,
    epsilon: float,
    gamma_sep: float | None = None,
    b_bound: float | None = None,
    *,
    rng: np.random.Generator | None = None,
    cloud_size: int = 16,
    view: MaskedView | None = None,
) -> BoundReport:
    """Evaluate the variance, entropy-gap and local-gain bounds on one instance."""
    view = MaskedView.build(world, mh) if view is None else view
    rng = np.random.default_rng(0) if rng is None else rng
    psi = psi_matrix(view)
    constants = check_assumptions(view, psi, gamma_sep=gamma_sep, b_bound=b_bound)

    active = np.flatnonzero(view.active)
    sigma_bar = 0.0
    g1_star = 0.0
    for v in active:
        m = ProbabilityVector(view.next_token[v])
        mean = m.expectation(psi[v])
        sigma = math.sqrt(max(m.expectation((psi[v] - mean) ** 2), 0.0))
        sigma_bar += view.posterior[v] * sigma
        solution = solve_tilt_for_radius(m, psi[v], epsilon)
        g1_star += view.posterior[v] * first_order_gain(solution.q, m, psi[v])

    factor = _entropy_gap_factor(view, constants)
    c_b = constants.c_b
    gamma = constants.gamma_sep
    delta_star, source = search_delta_star(view, epsilon, rng, psi=psi, cloud_size=cloud_size)
    checks = (
        BoundCheck('tilt_gain_floor', g1_star, math.sqrt(2.0 * epsilon) * sigma_bar - c_b * epsilon),
        BoundCheck('score_spread_floor', sigma_bar, gamma / math.sqrt(2.0 * math.pi * math.e) * factor),
        BoundCheck(
            'local_gain_floor',
            delta_star,
            gamma * math.sqrt(epsilon) / math.sqrt(math.pi * math.e) * factor - c_b * epsilon,
        ),
    )
    return BoundReport(epsilon=epsilon, constants=constants, checks=checks, delta_star_source=source)


def set_lower_bound(
    world: WorldModel,
    trajectory: tuple[int, ...],
    anchor_set: frozenset[int],
    epsilon: float,
    *,
    rng: np.random.Generator | None = None,
    cloud_size: int = 16,
) -> BoundCheck:
    """Sum of per-step best gains against the sum of local lower bounds over a set."""
    rng = np.random.default_rng(0) if rng is None else rng
    total_gain = 0.0
    total_bound = 0.0
    for t in sorted(anchor_set):
        mh = MaskedHistory(trajectory[: t - 1], frozenset(a for a in anchor_set if a < t))
        report = verify_gain_bounds(world, mh, epsilon, rng=rng, cloud_size=cloud_size)
        local = next(check for check in report.checks if check.inequality == 'local_gain_floor')
        total_gain += local.lhs
        total_bound += max(local.rhs, 0.0)
    return BoundCheck('anchor_set_gain_floor', total_gain, total_bound)


def topk_modular_check(scores: list[float] | np.ndarray, k: int) -> tuple[int, ...]:
    """Indices of the k largest scores, ties to the earlier index, ascending."""
    values = [float(s) for s in scores]
    if not 0 <= k <= len(values):
        msg = f'k={k} must lie in [0, {len(values)}]'
        raise ValueError(msg)
    order = sorted(range(len(values)), key=lambda i: (-values[i], i))
    chosen = tuple(sorted(order[:k]))
    if len(values) <= EXHAUSTIVE_TOPK_LIMIT:
        value = sum(values[i] for i in chosen)
        best = max(sum(values[i] for i in subset) for subset in combinations(range(len(values)), k))
        if abs(value - best) > 1e-12 * max(1.0, abs(best)):
            msg = f'greedy top-{k} value {value} differs from exhaustive {best}'
            raise IdentityViolation(msg)
    return chosen


__all__ = [
    'BOUND_SLACK',
    'IDENTITY_TOLERANCE',
    'NATIVE',
    'BoundCheck',
    'BoundReport',
    'DecompositionTerms',
    'InstanceConstants',
    'Intervention',
    'Native',
    'check_assumptions',
    'decomposition_terms',
    'delta_gain',
    'first_order_gain_oracle',
    'mi_downstream',
    'mi_from_view',
    'mi_identity_gap',
    'point_mass_intervention',
    'psi_matrix',
    'psi_path_gap',
    'psi_score',
    'psi_vector',
    'random_feasible_cloud',
    'random_feasible_intervention',
    'search_delta_star',
    'set_lower_bound',
    'tilted_intervention',
    'topk_modular_check',
    'verify_exact_decomposition',
    'verify_gain_bounds',
]
