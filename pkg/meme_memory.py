"""
Per-robot meme stores and the three memory policies.
"""

import bisect
import logging
import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np

from memes import Meme, MemeRegistry, seed_segments
from telemetry import EventLog

logger = logging.getLogger(__name__)

_POLICY_PATTERN = re.compile(r"^(none|unlimited|limited)(?:\((\d+)\))?$")


@dataclass(frozen=True)
class MemoryPolicy:
    kind: str
    capacity: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("none", "limited", "unlimited"):
            raise ValueError(f"Unknown memory policy '{self.kind}'")
        if self.kind == "limited" and (self.capacity is None or self.capacity < 1):
            raise ValueError("limited memory needs a capacity >= 1")

    @classmethod
    def parse(cls, text: str, default_capacity: int = 5) -> "MemoryPolicy":
        """Parse 'none', 'unlimited', 'limited' or 'limited(5)'."""
        match = _POLICY_PATTERN.match(text.strip())
        if not match:
            raise ValueError(f"Cannot parse memory policy '{text}'")
        kind, capacity = match.group(1), match.group(2)
        if kind != "limited":
            return cls(kind)
        return cls(kind, int(capacity) if capacity else default_capacity)

    @property
    def max_entries(self) -> Optional[int]:
        # "No memory" still keeps the most recent meme so the robot can enact
        if self.kind == "none":
            return 1
        if self.kind == "limited":
            return self.capacity
        return None

    @property
    def label(self) -> str:
        return f"limited({self.capacity})" if self.kind == "limited" else self.kind


@dataclass(frozen=True, order=True)
class StoreEntry:
    acquired_at: float
    meme_id: int


class MemeStore:
    """The memes one robot currently remembers, oldest first."""

    def __init__(self, robot_id: int, policy: Union[MemoryPolicy, str] = "limited(5)",
                 log: Optional[EventLog] = None):
        self.robot_id = robot_id
        self.policy = MemoryPolicy.parse(policy) if isinstance(policy, str) else policy
        self.log = log
        self.entries: List[StoreEntry] = []
        self.evictions = 0

    def store(self, meme: Meme, t: float) -> List[int]:
        """Add a meme; returns the ids evicted to respect the capacity."""
        bisect.insort(self.entries, StoreEntry(float(t), meme.meme_id))
        evicted = []
        limit = self.policy.max_entries
        while limit is not None and len(self.entries) > limit:
            oldest = self.entries.pop(0)
            evicted.append(oldest.meme_id)
            self.evictions += 1
            if self.log is not None:
                self.log.emit("eviction", t, [self.robot_id], robot=self.robot_id, meme_id=oldest.meme_id)
        return evicted

    def select_for_enactment(self, rng: np.random.Generator) -> Optional[int]:
        """Uniform draw over stored memes; None means the robot skips its turn."""
        if not self.entries:
            return None
        return self.entries[int(rng.integers(len(self.entries)))].meme_id

    @property
    def meme_ids(self) -> List[int]:
        return [entry.meme_id for entry in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, meme_id) -> bool:
        return meme_id in self.meme_ids


def collective_memory(stores: Iterable[MemeStore]) -> Counter:
    """Multiset union of every store's meme ids."""
    memory = Counter()
    for store in stores:
        memory.update(store.meme_ids)
    return memory


def seed_robots(
    stores: Sequence[MemeStore],
    seed_memes: Sequence,
    registry: MemeRegistry,
    t: float = 0.0,
    log: Optional[EventLog] = None,
) -> List[Meme]:
    """
    Register each seed shape once (tagged 1, 2, ...) and put it in every store.

    All robots share the seed's id, so the lineage has one root per seed.
    """
    owners = [store.robot_id for store in stores]
    seeds = []
    for tag, shape in enumerate(seed_memes, start=1):
        meme = registry.register_seed(seed_segments(shape), tag=tag, t=t, owners=owners)
        seeds.append(meme)
        if log is not None:
            log.emit("seed", t, owners, meme=meme.to_record())
        for store in stores:
            store.store(meme, t)
    logger.info("Seeded %d robots with %d memes", len(stores), len(seeds))
    return seeds
