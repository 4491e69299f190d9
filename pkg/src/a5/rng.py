"""Counter-based random streams.

Every random draw in a5 comes from a Philox generator keyed by the run seed and
a tuple of stream labels (e.g. ``("pgd", epoch, batch)``).  Streams do not
depend on the order in which they are requested, so reordering work never
changes the numbers a given stream produces.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

ALGORITHM = "philox4x64-10"


def _label_key(label) -> int:
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError(f"stream labels must be non-negative, got {label}")
        return int(label)
    digest = hashlib.sha256(str(label).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class Rng:
    seed: int
    stream: tuple = ()

    algorithm = ALGORITHM

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError(f"seed must fit in an unsigned 64-bit integer, got {self.seed}")

    def child(self, *labels) -> "Rng":
        return Rng(self.seed, self.stream + tuple(labels))

    def generator(self, *labels) -> np.random.Generator:
        keys = tuple(_label_key(lbl) for lbl in self.stream + tuple(labels))
        ss = np.random.SeedSequence(int(self.seed), spawn_key=keys)
        return np.random.Generator(np.random.Philox(ss))
