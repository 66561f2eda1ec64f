"""Common CLI functionality shared across rapo-lab subcommands."""

import os
import subprocess
import sys
from datetime import UTC, datetime
from pathlib import Path
from typing import Any

import yaml
from hotlog import configure_logging, get_logger

from rapo_lab.config import OUTPUT_ROOT_ENV, RapoConfigError
from rapo_lab.errors import CorruptCheckpoint, NonFiniteLoss, VersionMismatch
from rapo_lab.models import RunManifest
from rapo_lab.version import __version__

logger = get_logger(__name__)

MANIFEST_FILENAME = 'manifest.yaml'
DEFAULT_OUTPUT_ROOT = 'rapo-runs'

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3


def setup_logging(*, verbose: int) -> None:
    """Configure logging with appropriate verbosity."""
    configure_logging(verbosity=verbose)
    logger.info(
        'rapo_lab_initialized',
        _verbose_rapo_lab_version=__version__,
        _display_level=1,
    )


def resolve_output_dir(out: Path | None, subcommand: str) -> Path:
    """``--out``, else ``$RAPO_LAB_OUT/<subcommand>``, else ``./rapo-runs/<subcommand>``."""
    if out is not None:
        return out.resolve()
    root = os.environ.get(OUTPUT_ROOT_ENV)
    base = Path(root) if root else Path.cwd() / DEFAULT_OUTPUT_ROOT
    return (base / subcommand).resolve()


def describe_version() -> str:
    """``git describe`` of the source checkout when available, else the package version."""
    try:
        completed = subprocess.run(  # noqa: S603 - fixed argument list
            ['git', 'describe', '--tags', '--always', '--dirty'],  # noqa: S607 - git from PATH
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            check=True,
            timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return __version__
    described = completed.stdout.strip()
    return f'{__version__}+{described}' if described else __version__


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, RapoConfigError | CorruptCheckpoint | VersionMismatch):
        return EXIT_USAGE
    if isinstance(exc, NonFiniteLoss | FloatingPointError):
        return EXIT_NUMERIC
    return EXIT_FAILURE


def handle_cli_exception(e: Exception) -> int:
    """Log and echo a failure; returns the exit code it maps to."""
    code = exit_code_for(e)
    logger.error('cli_operation_failed', error=str(e), error_type=type(e).__name__, exit_code=code)
    print(f'rapo-lab: error: {e}', file=sys.stderr)  # noqa: T201 - diagnostic on stderr
    return code


class ManifestRecorder:
    """Writes ``manifest.yaml`` before work starts and finalises it on exit."""

    def __init__(self, subcommand: str, out_dir: Path, argv: list[str] | None = None) -> None:
        self.path = out_dir / MANIFEST_FILENAME
        self.manifest = RunManifest(
            subcommand=subcommand,
            argv=list(sys.argv[1:] if argv is None else argv),
            config={},
            seed=None,
            output_dir=str(out_dir),
            version=describe_version(),
            started_at=datetime.now(tz=UTC),
        )

    def _write(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open('w') as fh:
            yaml.safe_dump(self.manifest.model_dump(mode='json'), fh, sort_keys=False)

    def start(self, *, config: dict[str, Any], seed: int | None) -> None:
        self.manifest = self.manifest.model_copy(update={'config': config, 'seed': seed})
        self._write()
        logger.debug('manifest_written', path=str(self.path))

    def finish(self, exit_code: int) -> int:
        self.manifest = self.manifest.model_copy(
            update={
                'finished_at': datetime.now(tz=UTC),
                'status': 'succeeded' if exit_code == EXIT_OK else 'failed',
                'exit_code': exit_code,
            }
        )
        self._write()
        return exit_code


def load_manifest(path: Path) -> RunManifest:
    with path.open() as fh:
        return RunManifest.model_validate(yaml.safe_load(fh))


__all__ = [
    'EXIT_FAILURE',
    'EXIT_NUMERIC',
    'EXIT_OK',
    'EXIT_USAGE',
    'MANIFEST_FILENAME',
    'ManifestRecorder',
    'describe_version',
    'exit_code_for',
    'handle_cli_exception',
    'load_manifest',
    'resolve_output_dir',
    'setup_logging',
]
