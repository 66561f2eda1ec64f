"""Pydantic models for configuration and every record written to disk."""

import hashlib
from datetime import datetime
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

Variant = Literal['grpo', 'rapo_g', 'rapo_d']
AnchorStrategy = Literal['entropy', 'random', 'low_entropy', 'outlier', 'fixed_count']
Status = Literal['SATISFIED', 'VIOLATED', 'SKIPPED']

RAPO_D_CLIP_HIGH = 0.28


class TaskConfig(BaseModel):
    """Layout and difficulty of the visual-needle task.

    Token ids are carved out of the policy vocabulary in fixed blocks of
    ``n_symbols``: needle symbols, background vision symbols, answer tokens,
    then the question marker followed by filler text tokens.
    """

    model_config = ConfigDict(extra='forbid')

    vocab: int = Field(default=32, ge=8)
    n_symbols: int = Field(default=4, ge=2)
    n_vision: int = Field(default=4, ge=1)
    n_distractors: int = Field(default=6, ge=0)
    chain_length: int = Field(default=9, ge=0)

    @model_validator(mode='after')
    def _check_layout(self) -> 'TaskConfig':
        if self.filler_base >= self.vocab:
            msg = f'vocab {self.vocab} leaves no filler tokens for {self.n_symbols} symbols'
            raise ValueError(msg)
        return self

    @property
    def needle_base(self) -> int:
        return 0

    @property
    def background_base(self) -> int:
        return self.n_symbols

    @property
    def answer_base(self) -> int:
        return 2 * self.n_symbols

    @property
    def question_token(self) -> int:
        return 3 * self.n_symbols

    @property
    def filler_base(self) -> int:
        return 3 * self.n_symbols + 1

    @property
    def vision_token_ids(self) -> tuple[int, ...]:
        return tuple(range(self.answer_base))

    @property
    def prompt_length(self) -> int:
        """Vision prefix plus distractors plus the question marker."""
        return self.n_vision + self.n_distractors + 1

    @property
    def horizon(self) -> int:
        """Generated tokens per trajectory: the chain plus the answer slot."""
        return self.chain_length + 1


class PolicyConfig(BaseModel):
    """Shape of the toy causal-attention policy."""

    model_config = ConfigDict(extra='forbid')

    vocab: int = Field(default=32, ge=2)
    d_model: int = Field(default=32, ge=1)
    d_ff: int = Field(default=64, ge=1)
    n_layers: int = Field(default=2, ge=1)
    max_len: int = Field(default=64, ge=2)
    init_std: float = Field(default=0.02, gt=0.0)
    freeze_vision_embeddings: bool = True


class TrainConfig(BaseModel):
    """Everything that determines a training run."""

    model_config = ConfigDict(extra='forbid')

    variant: Variant = 'rapo_g'
    rho: float = Field(default=0.2, gt=0.0, le=1.0)
    gamma: float = Field(default=0.01, ge=0.0)
    window: int = Field(default=3, ge=1)
    beta: float = Field(default=0.02, ge=0.0)
    clip_low: float = Field(default=0.2, gt=0.0, lt=1.0)
    clip_high: float | None = Field(default=None, gt=0.0)
    group_size: int = Field(default=5, ge=2)
    prompts_per_step: int = Field(default=8, ge=1)
    lr: float = Field(default=1e-6, ge=0.0)
    weight_decay: float = Field(default=0.0, ge=0.0)
    steps: int = Field(default=100, ge=0)
    seed: int = Field(default=0, ge=0)
    temperature: float = Field(default=1.0, gt=0.0)
    sqrt_delta: float = Field(default=1e-8, gt=0.0)
    checkpoint_every: int = Field(default=50, ge=0)
    anchor_strategy: AnchorStrategy = 'entropy'
    fixed_anchor_count: int = Field(default=2, ge=0)
    dynamic_sampling_rounds: int = Field(default=3, ge=0)
    task: TaskConfig = Field(default_factory=TaskConfig)
    policy: PolicyConfig = Field(default_factory=PolicyConfig)

    @model_validator(mode='after')
    def _check_consistency(self) -> 'TrainConfig':
        if self.task.vocab != self.policy.vocab:
            msg = f'task vocab {self.task.vocab} differs from policy vocab {self.policy.vocab}'
            raise ValueError(msg)
        if self.task.prompt_length >= self.policy.max_len:
            msg = f'prompt length {self.task.prompt_length} leaves no room under max_len {self.policy.max_len}'
            raise ValueError(msg)
        return self

    @property
    def effective_clip_high(self) -> float:
        if self.clip_high is not None:
            return self.clip_high
        return RAPO_D_CLIP_HIGH if self.variant == 'rapo_d' else self.clip_low

    def digest(self) -> bytes:
        """SHA-256 of the canonical JSON form."""
        return hashlib.sha256(self.model_dump_json().encode()).digest()


class SweepConfig(BaseModel):
    """Size caps and seeds of the theory verification sweep."""

    model_config = ConfigDict(extra='forbid')

    seeds: int = Field(default=200, ge=0)
    base_seed: int = Field(default=0, ge=0)
    max_vocab: int = Field(default=6, ge=2, le=6)
    max_horizon: int = Field(default=3, ge=1, le=3)
    max_visual: int = Field(default=4, ge=1, le=4)
    epsilons: tuple[float, ...] = (1e-4, 1e-3, 1e-2)
    cloud_size: int = Field(default=16, ge=0)
    tilt_trials: int = Field(default=1000, ge=0)
    topk_max_length: int = Field(default=12, ge=1, le=12)
    workers: int = Field(default=1, ge=1)


class VerificationRecord(BaseModel):
    """One inequality or identity evaluated on one sweep instance."""

    seed: int
    inequality: str
    lhs: float
    rhs: float
    margin: float
    status: Status
    t: int | None = None
    masked: list[int] | None = None
    epsilon: float | None = None
    detail: str | None = None


class StepMetrics(BaseModel):
    """Per-step training metrics; free of wall-clock values."""

    step: int
    variant: Variant
    mean_reward: float
    mean_anchor_kl: float
    mean_entropy: float
    clip_fraction: float
    grad_norm: float
    objective: float
    n_anchors: int
    degenerate_groups: int
    filtered_groups: int = 0
    skipped: bool = False


class TimingRecord(BaseModel):
    step: int
    wall_ms: float


class TrajectoryRecord(BaseModel):
    """A dumped rollout for offline analysis."""

    instance_id: int
    group_index: int
    gold: int
    tokens: list[int]
    reward: float
    entropies: list[float]
    truncated: bool = False


class PropagationRecord(BaseModel):
    """Change in contrastive KL after cutting an anchor's visual access."""

    instance_id: int
    anchor_index: int
    anchor_step: int
    next_anchor_delta: float | None
    window_delta: float | None


class NoiseRecord(BaseModel):
    instance_id: int
    sigma: float
    mean_kl: float
    mean_kl_high_entropy: float
    mean_kl_low_entropy: float


class AttentionMaskingRecord(BaseModel):
    """Greedy accuracy with the most-attended versus random vision positions hidden."""

    instances: int
    fraction: float
    masked_positions: int
    baseline_accuracy: float
    attention_masked_accuracy: float
    random_masked_accuracy: float

    @property
    def attention_drop(self) -> float:
        return self.baseline_accuracy - self.attention_masked_accuracy

    @property
    def random_drop(self) -> float:
        return self.baseline_accuracy - self.random_masked_accuracy


class RunManifest(BaseModel):
    """Everything needed to rerun a CLI invocation exactly."""

    subcommand: str
    argv: list[str]
    config: dict[str, Any]
    seed: int | None
    output_dir: str
    version: str
    started_at: datetime
    finished_at: datetime | None = None
    status: Literal['running', 'succeeded', 'failed'] = 'running'
    exit_code: int | None = None


__all__ = [
    'RAPO_D_CLIP_HIGH',
    'AnchorStrategy',
    'AttentionMaskingRecord',
    'NoiseRecord',
    'PolicyConfig',
    'PropagationRecord',
    'RunManifest',
    'StepMetrics',
    'SweepConfig',
    'TaskConfig',
    'TimingRecord',
    'TrainConfig',
    'TrajectoryRecord',
    'Variant',
    'VerificationRecord',
]
