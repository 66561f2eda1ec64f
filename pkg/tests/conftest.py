import numpy as np
import pytest

from rapo_lab.models import PolicyConfig, TaskConfig, TrainConfig
from rapo_lab.policy import PolicyParams
from rapo_lab.task import SequenceLayout


def tiny_train_config(**updates: object) -> TrainConfig:
    """A run small enough for unit tests: 6 prompt tokens, 4 generated steps."""
    data: dict[str, object] = {
        'task': {'vocab': 16, 'n_symbols': 2, 'n_vision': 3, 'n_distractors': 2, 'chain_length': 3},
        'policy': {'vocab': 16, 'd_model': 8, 'd_ff': 16, 'n_layers': 2, 'max_len': 16, 'init_std': 0.3},
        'group_size': 2,
        'prompts_per_step': 2,
        'lr': 1e-2,
        'steps': 2,
        'checkpoint_every': 0,
        'seed': 3,
    }
    data.update(updates)
    return TrainConfig.model_validate(data)


@pytest.fixture
def train_config() -> TrainConfig:
    return tiny_train_config()


@pytest.fixture
def task_config(train_config: TrainConfig) -> TaskConfig:
    return train_config.task


@pytest.fixture
def layout(task_config: TaskConfig) -> SequenceLayout:
    return SequenceLayout.from_config(task_config)


@pytest.fixture
def policy_config() -> PolicyConfig:
    return PolicyConfig(vocab=6, d_model=4, d_ff=8, n_layers=2, max_len=8, init_std=0.3)


@pytest.fixture
def params(policy_config: PolicyConfig) -> PolicyParams:
    return PolicyParams.init(policy_config, np.random.default_rng(0))
