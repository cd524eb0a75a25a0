"""
Seed management for deterministic runs.

Every consumer of randomness gets its own numpy Generator derived from the
master seed and a context label, so adding a robot (or a trial) never shifts
the draws seen by anything else.
"""

import hashlib
from typing import Dict

import numpy as np


def derive_seed(master_seed: int, context: str) -> int:
    """Derive a 64-bit seed from the master seed and a context label."""
    combined = f"{int(master_seed)}:{context}".encode()
    return int.from_bytes(hashlib.sha256(combined).digest()[:8], "big")


class SeedManager:
    """Hands out named, independent random streams for one run."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: Dict[str, np.random.Generator] = {}

    def stream(self, context: str) -> np.random.Generator:
        """Return the generator for a context, creating it on first use."""
        if context not in self._streams:
            self._streams[context] = np.random.default_rng(derive_seed(self.seed, context))
        return self._streams[context]

    def robot_stream(self, robot_id: int, purpose: str) -> np.random.Generator:
        return self.stream(f"robot:{robot_id}:{purpose}")

    def child_seed(self, context: str) -> int:
        """Seed for a sub-run (trial, study cell) that builds its own manager."""
        return derive_seed(self.seed, context) % (2 ** 63)
