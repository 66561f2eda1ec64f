import logging
import re
from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path
from textwrap import dedent

import pytest

from rapo_lab.cli.rapo_lab import main
from rapo_lab.config import DEFAULT_CONFIG_FILENAME

TINY_CONFIG = """
variant: rapo_g
rho: 0.5
group_size: 2
prompts_per_step: 2
lr: 1.0e-2
steps: 2
checkpoint_every: 1
task:
  vocab: 16
  n_symbols: 2
  n_vision: 3
  n_distractors: 2
  chain_length: 3
policy:
  vocab: 16
  d_model: 8
  d_ff: 16
  n_layers: 1
  max_len: 16
  init_std: 0.3
"""


def strip_ansi(text: str) -> str:
    """Remove ANSI color codes from text."""
    return re.sub(r'\x1b\[[0-9;]*m', '', text)


@dataclass
class Result:
    returncode: int
    stdout: str
    stderr: str
    log: str

    @property
    def all_output(self) -> str:
        return self.stdout + self.stderr + self.log


CliCommand = Callable[[list[str], Path], Result]


@pytest.fixture
def run_rapo_lab(
    capsys: pytest.CaptureFixture,
    caplog: pytest.LogCaptureFixture,
    monkeypatch: pytest.MonkeyPatch,
) -> CliCommand:
    """Run ``rapo-lab`` in-process from ``cwd`` with ``$RAPO_LAB_OUT`` unset."""
    monkeypatch.delenv('RAPO_LAB_OUT', raising=False)
    caplog.set_level(logging.DEBUG)

    def _run(args: list[str], cwd: Path) -> Result:
        monkeypatch.chdir(cwd)
        try:
            exit_code = main(args)
        except SystemExit as exc:
            exit_code = exc.code if isinstance(exc.code, int) else 1
        captured = capsys.readouterr()
        log = strip_ansi(caplog.text)
        caplog.clear()
        return Result(exit_code, strip_ansi(captured.out), strip_ansi(captured.err), log)

    return _run


@pytest.fixture
def tiny_config(tmp_path: Path) -> Path:
    path = tmp_path / DEFAULT_CONFIG_FILENAME
    path.write_text(dedent(TINY_CONFIG).lstrip())
    return path


def assert_contains_all(output: str, snippets: list[str], context: str = ''):
    missing = [s for s in snippets if s not in output]
    if missing:
        pytest.fail(
            f'Missing expected snippet(s) in {context}: {missing}\nActual output:\n{output}',
        )
