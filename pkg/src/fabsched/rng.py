"""Named, independently seeded random streams.

Every stochastic process in the simulator (lot releases per product, machine
breakdowns, metrology skips, initial WIP placement) draws from its own stream
whose seed is derived from (master seed, stream name) via SHA-256. Adding a
new process therefore never perturbs the draws of existing ones, and results
are reproducible across interpreter runs and platforms (no reliance on
Python's salted ``hash``).
"""

from __future__ import annotations

import hashlib
import random

_U64 = 2**64


def derive_seed(master_seed: int, name: str) -> int:
    """Derive a stable 64-bit child seed from a master seed and a stream name."""
    digest = hashlib.sha256(f"{master_seed % _U64}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


class StreamSet:
    """Lazily created pool of named ``random.Random`` streams."""

    def __init__(self, master_seed: int):
        self.master_seed = master_seed
        self._streams: dict[str, random.Random] = {}

    def get(self, name: str) -> random.Random:
        stream = self._streams.get(name)
        if stream is None:
            stream = random.Random(derive_seed(self.master_seed, name))
            self._streams[name] = stream
        return stream
