"""AdamW with decoupled weight decay and frozen parameter entries."""

from dataclasses import dataclass, field

import numpy as np

from rapo_lab.policy import PolicyParams

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


def vision_freeze_mask(params: PolicyParams, vision_token_ids: tuple[int, ...]) -> dict[str, np.ndarray]:
    """Trainable mask with the vision-token embedding rows frozen."""
    rows = np.ones(params['tok_emb'].shape, dtype=bool)
    rows[list(vision_token_ids)] = False
    return {'tok_emb': rows}


@dataclass
class AdamW:
    """Adam moments with bias correction; weight decay applied to the weights directly.

    ``trainable`` maps a parameter name to a boolean array of its shape;
    entries marked False never move and keep zero moments.
    """

    lr: float
    weight_decay: float = 0.0
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = EPS
    trainable: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0
    m: PolicyParams | None = None
    v: PolicyParams | None = None

    def init_state(self, params: PolicyParams) -> None:
        self.m = params.zeros_like()
        self.v = params.zeros_like()
        self.step_count = 0

    def moments(self, params: PolicyParams) -> tuple[PolicyParams, PolicyParams]:
        """First and second moments, zero-initialised on first use."""
        first, second = self.m, self.v
        if first is None or second is None:
            first, second = params.zeros_like(), params.zeros_like()
            self.m, self.v, self.step_count = first, second, 0
        return first, second

    def step(self, params: PolicyParams, grads: PolicyParams) -> PolicyParams:
        """Return params moved against ``grads`` (a descent step)."""
        first, second = self.moments(params)
        self.step_count += 1
        correction1 = 1.0 - self.beta1**self.step_count
        correction2 = 1.0 - self.beta2**self.step_count

        updated = params.copy()
        for name, grad in grads.items():
            mask = self.trainable.get(name)
            if mask is not None:
                grad = np.where(mask, grad, 0.0)
            m = first[name]
            v = second[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            delta = self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            if self.weight_decay:
                delta = delta + self.lr * self.weight_decay * params[name]
            if mask is not None:
                delta = np.where(mask, delta, 0.0)
            updated.tensors[name] = params[name] - delta
        return updated


__all__ = ['BETA1', 'BETA2', 'EPS', 'AdamW', 'vision_freeze_mask']
