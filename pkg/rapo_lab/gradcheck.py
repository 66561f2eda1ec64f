"""Central finite-difference checks of analytic gradients."""

from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from rapo_lab.policy import PolicyParams

Coordinate = tuple[str, tuple[int, ...]]

DEFAULT_STEP = 1e-4
DEFAULT_SCALE_FLOOR = 1e-3


@dataclass(frozen=True)
class CoordinateCheck:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    relative_error: float


@dataclass(frozen=True)
class GradcheckReport:
    checks: tuple[CoordinateCheck, ...]

    @property
    def max_relative_error(self) -> float:
        return max((check.relative_error for check in self.checks), default=0.0)

    @property
    def worst(self) -> CoordinateCheck | None:
        return max(self.checks, key=lambda check: check.relative_error, default=None)


def sample_coordinates(
    params: PolicyParams,
    count: int,
    rng: np.random.Generator,
    trainable: dict[str, np.ndarray] | None = None,
) -> list[Coordinate]:
    """Draw ``count`` parameter coordinates uniformly over all entries."""
    names = list(params.tensors)
    sizes = np.array([params[name].size for name in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    coords: list[Coordinate] = []
    while len(coords) < count:
        flat = int(rng.integers(offsets[-1]))
        slot = int(np.searchsorted(offsets, flat, side='right') - 1)
        name = names[slot]
        index = tuple(int(i) for i in np.unravel_index(flat - offsets[slot], params[name].shape))
        if trainable is not None and name in trainable and not trainable[name][index]:
            continue
        coords.append((name, index))
    return coords


def gradcheck(
    fn: Callable[[PolicyParams], float],
    params: PolicyParams,
    grad: PolicyParams,
    coords: Sequence[Coordinate],
    h: float = DEFAULT_STEP,
    scale_floor: float = DEFAULT_SCALE_FLOOR,
) -> GradcheckReport:
    """Compare ``grad`` with (fn(p + h e) - fn(p - h e)) / 2h at each coordinate.

    Relative error is |analytic - numeric| / max(|analytic|, |numeric|,
    scale_floor); the floor keeps near-zero coordinates from dominating.
    """
    checks = []
    shifted = params.copy()
    for name, index in coords:
        original = shifted[name][index]
        shifted[name][index] = original + h
        upper = fn(shifted)
        shifted[name][index] = original - h
        lower = fn(shifted)
        shifted[name][index] = original
        numeric = (upper - lower) / (2.0 * h)
        analytic = float(grad[name][index])
        scale = max(abs(analytic), abs(numeric), scale_floor)
        checks.append(CoordinateCheck(name, index, analytic, numeric, abs(analytic - numeric) / scale))
    return GradcheckReport(tuple(checks))


__all__ = ['Coordinate', 'CoordinateCheck', 'GradcheckReport', 'gradcheck', 'sample_coordinates']
