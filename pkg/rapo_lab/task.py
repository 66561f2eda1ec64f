"""The visual-needle task.

A prompt is a short vision prefix (background symbols with one needle
symbol at a random slot), a run of filler distractors and a question
marker. The policy then emits ``chain_length`` free tokens followed by the
answer, which is correct iff it names the needle. Distractors carry no
answer information, so visual dependence has to survive the chain.
"""

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from rapo_lab.models import TaskConfig


@dataclass(frozen=True)
class SequenceLayout:
    """Index bookkeeping shared by rollouts, anchors and diagnostics.

    Generated step ``t`` (1-based) sits at sequence position
    ``prompt_length + t - 1`` and is emitted by the logits at position
    ``prompt_length + t - 2``.
    """

    n_vision: int
    prompt_length: int
    horizon: int

    @classmethod
    def from_config(cls, config: TaskConfig) -> 'SequenceLayout':
        return cls(n_vision=config.n_vision, prompt_length=config.prompt_length, horizon=config.horizon)

    @property
    def vision_positions(self) -> tuple[int, ...]:
        return tuple(range(self.n_vision))

    def token_position(self, t: int) -> int:
        return self.prompt_length + t - 1

    def emit_position(self, t: int) -> int:
        return self.prompt_length + t - 2

    @property
    def answer_slot(self) -> int:
        """Sequence position of the answer token."""
        return self.token_position(self.horizon)


@dataclass(frozen=True)
class TaskInstance:
    instance_id: int
    vision: tuple[int, ...]
    prompt: tuple[int, ...]
    gold: int
    chain_length: int
    needle_slot: int

    @property
    def prompt_tokens(self) -> np.ndarray:
        """Vision prefix followed by the text prompt."""
        return np.array(self.vision + self.prompt, dtype=np.int64)

    @property
    def horizon(self) -> int:
        return self.chain_length + 1


def make_task_instance(rng: np.random.Generator, config: TaskConfig, instance_id: int) -> TaskInstance:
    needle = int(rng.integers(config.n_symbols))
    slot = int(rng.integers(config.n_vision))
    vision = config.background_base + rng.integers(config.n_symbols, size=config.n_vision)
    vision[slot] = config.needle_base + needle
    n_filler = config.vocab - config.filler_base
    distractors = config.filler_base + rng.integers(n_filler, size=config.n_distractors)
    return TaskInstance(
        instance_id=instance_id,
        vision=tuple(int(token) for token in vision),
        prompt=(*(int(token) for token in distractors), config.question_token),
        gold=gold_answer(tuple(int(token) for token in vision), config),
        chain_length=config.chain_length,
        needle_slot=slot,
    )


def gold_answer(vision: tuple[int, ...], config: TaskConfig) -> int:
    """Answer token named by the (first) needle in a vision prefix."""
    for token in vision:
        if config.needle_base <= token < config.needle_base + config.n_symbols:
            return config.answer_base + token - config.needle_base
    msg = f'vision prefix {vision} holds no needle symbol'
    raise ValueError(msg)


class Generated(Protocol):
    tokens: np.ndarray
    truncated: bool


def reward(instance: TaskInstance, trajectory: Generated) -> float:
    """1.0 iff the answer slot holds the gold answer; truncation scores 0."""
    tokens = trajectory.tokens
    if trajectory.truncated or len(tokens) < instance.horizon:
        return 0.0
    return 1.0 if int(tokens[instance.horizon - 1]) == instance.gold else 0.0


__all__ = ['Generated', 'SequenceLayout', 'TaskInstance', 'gold_answer', 'make_task_instance', 'reward']
