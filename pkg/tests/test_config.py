import argparse
from pathlib import Path
from textwrap import dedent

import pytest

from rapo_lab.argparse import (
    argparse_measure,
    argparse_non_negative_int,
    argparse_output_dir,
    argparse_override,
    argparse_positive_int,
)
from rapo_lab.config import (
    DEFAULT_CONFIG_FILENAME,
    RapoConfigError,
    apply_overrides,
    build_sweep_config,
    load_train_config,
    parse_override,
)
from rapo_lab.models import TrainConfig


@pytest.fixture
def config_path(tmp_path: Path) -> Path:
    return tmp_path / DEFAULT_CONFIG_FILENAME


def write_config(path: Path, content: str) -> None:
    path.write_text(dedent(content).lstrip())


def test_load_train_config_merges_file_overrides_and_flags(config_path: Path) -> None:
    write_config(
        config_path,
        """
        variant: grpo
        lr: 1.0e-3
        steps: 300
        task:
          chain_length: 5
          n_vision: 6
        policy:
          d_model: 16
        """,
    )

    config = load_train_config(
        config_path,
        overrides=[('task.chain_length', 7), ('steps', 50)],
        flags={'steps': 10, 'variant': None, 'seed': 4},
    )

    assert isinstance(config, TrainConfig)
    assert config.variant == 'grpo'
    assert config.lr == 1e-3
    assert config.steps == 10
    assert config.seed == 4
    assert config.task.chain_length == 7
    assert config.task.n_vision == 6
    assert config.policy.d_model == 16
    assert config.policy.d_ff == 64


def test_defaults_without_a_file() -> None:
    config = load_train_config()
    assert config == TrainConfig()
    assert config.effective_clip_high == config.clip_low


def test_rapo_d_defaults_to_asymmetric_clip() -> None:
    config = load_train_config(flags={'variant': 'rapo_d'})
    assert config.effective_clip_high == pytest.approx(0.28)


@pytest.mark.parametrize(
    'content',
    [
        'unknown_key: 1',
        'rho: 0.0',
        'variant: ppo',
        'task:\n  vocab: 16\n',
        'group_size: 1',
    ],
)
def test_invalid_values_raise(config_path: Path, content: str) -> None:
    write_config(config_path, content)

    with pytest.raises(RapoConfigError, match='invalid training configuration'):
        load_train_config(config_path)


def test_missing_config_file(tmp_path: Path) -> None:
    missing = tmp_path / DEFAULT_CONFIG_FILENAME
    with pytest.raises(RapoConfigError, match='configuration file not found') as excinfo:
        load_train_config(missing)
    assert str(missing) in str(excinfo.value)


def test_invalid_yaml_raises(config_path: Path) -> None:
    config_path.write_text('task: [invalid')

    with pytest.raises(RapoConfigError, match='failed to parse YAML'):
        load_train_config(config_path)


def test_non_mapping_root_raises(config_path: Path) -> None:
    config_path.write_text('- 1\n- 2\n')

    with pytest.raises(RapoConfigError, match='must be a mapping'):
        load_train_config(config_path)


def test_empty_file_gives_defaults(config_path: Path) -> None:
    config_path.write_text('')
    assert load_train_config(config_path) == TrainConfig()


@pytest.mark.parametrize(
    ('text', 'expected'),
    [
        ('lr=0.0001', ('lr', 0.0001)),
        ('task.chain_length=3', ('task.chain_length', 3)),
        ('variant=grpo', ('variant', 'grpo')),
        ('policy.freeze_vision_embeddings=false', ('policy.freeze_vision_embeddings', False)),
        ('clip_high=', ('clip_high', None)),
    ],
)
def test_parse_override(text: str, expected: tuple[str, object]) -> None:
    assert parse_override(text) == expected


@pytest.mark.parametrize('text', ['lr', '=3', 'lr=[1'])
def test_parse_override_rejects(text: str) -> None:
    with pytest.raises(RapoConfigError):
        parse_override(text)


def test_apply_overrides_copies_nested_mappings() -> None:
    data = {'task': {'chain_length': 9}, 'lr': 1.0}
    merged = apply_overrides(data, [('task.chain_length', 2), ('policy.d_model', 8)])
    assert merged == {'task': {'chain_length': 2}, 'lr': 1.0, 'policy': {'d_model': 8}}
    assert data == {'task': {'chain_length': 9}, 'lr': 1.0}


def test_apply_overrides_refuses_to_descend_into_scalars() -> None:
    with pytest.raises(RapoConfigError, match='non-mapping'):
        apply_overrides({'lr': 1.0}, [('lr.value', 2)])


def test_build_sweep_config_ignores_unset_values() -> None:
    config = build_sweep_config({'seeds': 5, 'max_vocab': None, 'workers': 2})
    assert (config.seeds, config.max_vocab, config.workers) == (5, 6, 2)


def test_build_sweep_config_rejects_oversized_worlds() -> None:
    with pytest.raises(RapoConfigError, match='max_vocab'):
        build_sweep_config({'max_vocab': 7})


def test_argparse_types() -> None:
    assert argparse_override('steps=4') == ('steps', 4)
    assert argparse_non_negative_int('0') == 0
    assert argparse_positive_int('3') == 3
    assert argparse_measure('noise') == 'noise'


@pytest.mark.parametrize(
    ('parse', 'value'),
    [
        (argparse_override, 'no-equals-sign'),
        (argparse_non_negative_int, '-1'),
        (argparse_non_negative_int, 'many'),
        (argparse_positive_int, '0'),
        (argparse_measure, 'entropy'),
    ],
)
def test_argparse_types_reject(parse: object, value: str) -> None:
    with pytest.raises(argparse.ArgumentTypeError):
        parse(value)  # type: ignore[operator]


def test_argparse_output_dir(tmp_path: Path) -> None:
    assert argparse_output_dir(str(tmp_path / 'new')) == tmp_path / 'new'
    existing = tmp_path / 'file.txt'
    existing.write_text('')
    with pytest.raises(argparse.ArgumentTypeError, match='not a directory'):
        argparse_output_dir(str(existing))
