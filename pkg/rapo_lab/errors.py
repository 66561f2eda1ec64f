"""Exception types raised across rapo_lab."""


class RapoLabError(RuntimeError):
    """Base class for every rapo_lab failure."""


class AbsoluteContinuityViolation(RapoLabError):
    """Raised when p puts mass where the reference q has none."""


class DegenerateScore(RapoLabError):
    """Raised when a score is constant on the support of its distribution."""


class ZeroProbabilityHistory(RapoLabError):
    """Raised when a masked history has zero probability under a world."""


class IdentityViolation(RapoLabError):
    """Raised when two evaluations of the same quantity disagree."""


class AssumptionViolated(RapoLabError):
    """Raised when an instance does not satisfy a bound's assumptions."""

    def __init__(self, assumption: str, detail: str) -> None:
        super().__init__(f'{assumption}: {detail}')
        self.assumption = assumption
        self.detail = detail


class LengthExceeded(RapoLabError):
    """Raised when a sequence is longer than the policy's context."""


class NonFiniteLoss(RapoLabError):
    """Raised when an objective value or gradient is not finite."""


class VersionMismatch(RapoLabError):
    """Raised when a checkpoint was written by another format version."""


class CorruptCheckpoint(RapoLabError):
    """Raised when a checkpoint fails structural or checksum validation."""


class NoNextAnchor(RapoLabError):
    """Raised when a measurement needs an anchor after the last one."""


class EmptyBatch(RapoLabError):
    """Raised when dynamic sampling filters out every group."""


__all__ = [
    'AbsoluteContinuityViolation',
    'AssumptionViolated',
    'CorruptCheckpoint',
    'DegenerateScore',
    'EmptyBatch',
    'IdentityViolation',
    'LengthExceeded',
    'NoNextAnchor',
    'NonFiniteLoss',
    'RapoLabError',
    'VersionMismatch',
    'ZeroProbabilityHistory',
]
