"""Named, keyed random streams derived from one seed.

Every draw in rapo_lab comes from ``KeyedStreams(seed).stream(tag, *keys)``.
A stream depends only on the seed, the tag and the integer keys, never on
how many other streams were consumed before it.
"""

import zlib
from dataclasses import dataclass

import numpy as np

TAGS = ('init', 'task', 'rollout', 'anchors', 'noise', 'sweep', 'diagnose', 'gradcheck')


@dataclass(frozen=True)
class KeyedStreams:
    seed: int

    def stream(self, tag: str, *keys: int) -> np.random.Generator:
        if tag not in TAGS:
            msg = f'unknown stream tag "{tag}"'
            raise ValueError(msg)
        spawn_key = (zlib.crc32(tag.encode()), *(int(k) for k in keys))
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=spawn_key)))


__all__ = ['TAGS', 'KeyedStreams']
