"""Counter-based, path-addressed random streams.

Every random decision in the pipeline draws from an ``RngStream`` identified by
a root seed plus a path of labels (``epoch -> image -> view -> op``).  A path is
turned into a numpy ``SeedSequence`` spawn key, so the numbers a stream yields
depend only on ``(seed, path)`` and never on the order in which other streams
were consumed.  This is what lets data preparation run on any number of
workers while staying bit-identical.

Labels are mixed in with BLAKE2b, so ``"view"`` and ``3`` and ``"3"`` are all
distinct sub-keys.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

Label = int | str


def _label_key(label: Label) -> int:
    if isinstance(label, bool) or not isinstance(label, (int, str)):
        raise TypeError(f"stream labels must be int or str, got {type(label).__name__}")
    tag = b"i:" if isinstance(label, int) else b"s:"
    digest = hashlib.blake2b(tag + str(label).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class RngStream:
    seed: int
    path: tuple[Label, ...] = field(default=())

    def __post_init__(self) -> None:
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def child(self, *labels: Label) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(labels))

    def seed_sequence(self) -> np.random.SeedSequence:
        return np.random.SeedSequence(
            entropy=int(self.seed), spawn_key=tuple(_label_key(x) for x in self.path)
        )

    def generator(self) -> np.random.Generator:
        """A fresh generator positioned at the start of this stream."""
        return np.random.Generator(np.random.PCG64(self.seed_sequence()))

    def __str__(self) -> str:
        return f"{self.seed}:" + "/".join(str(x) for x in self.path)
