"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic        8 bytes   b'RAPOLAB\\0'
    version      u32
    digest       32 bytes  SHA-256 of the training config JSON
    meta_len     u64
    metadata     JSON      names, shapes, step, seed, config echo
    blocks       <f8       params, Adam first moments, Adam second moments,
                           reference params (each in metadata name order)
    checksum     32 bytes  SHA-256 of everything above
"""

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from hotlog import get_logger

from rapo_lab.errors import CorruptCheckpoint, VersionMismatch
from rapo_lab.models import TrainConfig
from rapo_lab.policy import PolicyParams

logger = get_logger(__name__)

MAGIC = b'RAPOLAB\0'
FORMAT_VERSION = 1
_HEADER = struct.Struct('<8sI32sQ')
_CHECKSUM_BYTES = 32
_BLOCKS = ('params', 'adam_m', 'adam_v', 'reference')


@dataclass
class Checkpoint:
    """Everything needed to resume a run bit-exactly.

    Random state is not stored: every draw comes from streams keyed by
    (seed, tag, step, ...), so the seed and step are enough.
    """

    config: TrainConfig
    step: int
    seed: int
    params: PolicyParams
    adam_m: PolicyParams
    adam_v: PolicyParams
    reference: PolicyParams
    adam_steps: int = 0


def _encode(ckpt: Checkpoint) -> bytes:
    names = list(ckpt.params.tensors)
    metadata = {
        'names': names,
        'shapes': [list(ckpt.params[name].shape) for name in names],
        'step': ckpt.step,
        'seed': ckpt.seed,
        'adam_steps': ckpt.adam_steps,
        'config': ckpt.config.model_dump(mode='json'),
    }
    meta = json.dumps(metadata, sort_keys=True).encode()
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, ckpt.config.digest(), len(meta)), meta]
    for block in _BLOCKS:
        tensors: PolicyParams = getattr(ckpt, block)
        parts.extend(np.ascontiguousarray(tensors[name], dtype='<f8').tobytes() for name in names)
    body = b''.join(parts)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(ckpt: Checkpoint, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + '.tmp')
    tmp.write_bytes(_encode(ckpt))
    tmp.replace(path)
    logger.info('checkpoint_saved', path=str(path), step=ckpt.step, _display_level=1)


def load_checkpoint(path: Path) -> Checkpoint:
    """Read a checkpoint, validating version, digest and checksum."""
    try:
        data = path.read_bytes()
    except OSError as exc:
        msg = f'cannot read checkpoint {path}: {exc}'
        raise CorruptCheckpoint(msg) from exc

    if len(data) < _HEADER.size + _CHECKSUM_BYTES:
        msg = f'checkpoint {path} is truncated ({len(data)} bytes)'
        raise CorruptCheckpoint(msg)
    magic, version, digest, meta_len = _HEADER.unpack_from(data)
    if magic != MAGIC:
        msg = f'{path} is not a rapo_lab checkpoint'
        raise CorruptCheckpoint(msg)
    if version != FORMAT_VERSION:
        msg = f'checkpoint {path} has format version {version}, expected {FORMAT_VERSION}'
        raise VersionMismatch(msg)

    body, checksum = data[:-_CHECKSUM_BYTES], data[-_CHECKSUM_BYTES:]
    if hashlib.sha256(body).digest() != checksum:
        msg = f'checkpoint {path} failed its checksum'
        raise CorruptCheckpoint(msg)

    offset = _HEADER.size
    try:
        metadata = json.loads(body[offset : offset + meta_len])
        config = TrainConfig.model_validate(metadata['config'])
        names: list[str] = metadata['names']
        shapes = [tuple(shape) for shape in metadata['shapes']]
    except (ValueError, KeyError) as exc:
        msg = f'checkpoint {path} has unreadable metadata'
        raise CorruptCheckpoint(msg) from exc
    if config.digest() != digest:
        msg = f'checkpoint {path} config digest does not match its metadata'
        raise CorruptCheckpoint(msg)
    offset += meta_len

    blocks: dict[str, PolicyParams] = {}
    for block in _BLOCKS:
        tensors = {}
        for name, shape in zip(names, shapes, strict=True):
            count = int(np.prod(shape))
            end = offset + 8 * count
            if end > len(body):
                msg = f'checkpoint {path} ends inside block {block}'
                raise CorruptCheckpoint(msg)
            flat = np.frombuffer(body, dtype='<f8', count=count, offset=offset)
            tensors[name] = flat.astype(np.float64).reshape(shape)
            offset = end
        blocks[block] = PolicyParams(config=config.policy, tensors=tensors)
    if offset != len(body):
        msg = f'checkpoint {path} has {len(body) - offset} trailing bytes'
        raise CorruptCheckpoint(msg)

    logger.debug('checkpoint_loaded', path=str(path), step=metadata['step'])
    return Checkpoint(
        config=config,
        step=int(metadata['step']),
        seed=int(metadata['seed']),
        adam_steps=int(metadata.get('adam_steps', 0)),
        **blocks,
    )


__all__ = ['FORMAT_VERSION', 'MAGIC', 'Checkpoint', 'load_checkpoint', 'save_checkpoint']
