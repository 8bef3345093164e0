"""Deterministic, counter-based random number streams.

Every randomized component (parameter init, shuffling, dropout masks, the
synthetic-data generator) draws from a :class:`Rng` handle instead of global
state.  A handle is a 64-bit seed plus a tuple of stream labels; the pair is
hashed into a Philox key, so any (seed, labels) combination yields the same
stream on every platform and in any call order.  Deriving children is cheap
and collision-resistant, which makes parallel work reproducible: each worker
gets its own labeled stream instead of a slice of a shared sequence.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

__all__ = ["Rng"]


@dataclass(frozen=True)
class Rng:
    """Handle for a named, reproducible random stream."""

    seed: int
    stream: tuple = field(default_factory=tuple)

    def child(self, *labels) -> "Rng":
        """Derive an independent stream tagged by extra labels (str or int)."""
        for lab in labels:
            if not isinstance(lab, (str, int)):
                raise TypeError(f"stream labels must be str or int, got {type(lab)!r}")
        return Rng(self.seed, self.stream + tuple(labels))

    def _key(self) -> np.ndarray:
        tag = repr((int(self.seed), self.stream)).encode()
        digest = hashlib.sha256(tag).digest()
        return np.frombuffer(digest[:16], dtype=np.uint64)

    def generator(self) -> np.random.Generator:
        """Fresh numpy Generator for this stream.

        Philox is counter-based: the key fully determines the stream, and a
        fresh generator always restarts it from the beginning.
        """
        return np.random.Generator(np.random.Philox(key=self._key()))
