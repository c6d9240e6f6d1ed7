"""Per-node simulation state: parameters, context, energy store, replay buffer.

Energy only moves through `spend` and `harvest`, which double-book every
change into the node's energy log; the conservation audit in the network
module checks the store against that log at the end of a run.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .context import ContextVector
from .model import ModelParams
from .resources import CapacityProfile


@dataclass
class ReplayEntry:
    x: np.ndarray
    y: int
    synthetic: bool = False


class ReplayBuffer:
    """Bounded FIFO of labelled samples; synthetic entries are evicted first."""

    def __init__(self, capacity: int, entry_bytes: int):
        self.capacity = capacity
        self.entry_bytes = entry_bytes
        self.entries: list[ReplayEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def bytes_used(self) -> int:
        return len(self.entries) * self.entry_bytes

    def add(self, x: np.ndarray, y: int, synthetic: bool = False) -> None:
        while len(self.entries) >= self.capacity > 0:
            self._evict_one()
        if self.capacity > 0:
            self.entries.append(ReplayEntry(x=np.asarray(x, dtype=np.float64), y=int(y),
                                            synthetic=synthetic))

    def _evict_one(self) -> None:
        for i, e in enumerate(self.entries):
            if e.synthetic:
                del self.entries[i]
                return
        del self.entries[0]

    def class_means(self):
        """Per-class mean feature vectors and counts over the buffer."""
        if not self.entries:
            return None
        dim = self.entries[0].x.shape[0]
        classes = max(e.y for e in self.entries) + 1
        sums = np.zeros((classes, dim))
        counts = np.zeros(classes)
        for e in self.entries:
            sums[e.y] += e.x
            counts[e.y] += 1
        means = np.zeros_like(sums)
        nz = counts > 0
        means[nz] = sums[nz] / counts[nz, None]
        return means, counts

    def draw(self, n: int, gen: np.random.Generator):
        if not self.entries or n <= 0:
            return []
        idx = gen.integers(0, len(self.entries), size=min(n, len(self.entries)))
        return [self.entries[int(i)] for i in idx]


@dataclass
class NodeState:
    node_id: int
    params: ModelParams
    context: ContextVector
    capacity: CapacityProfile
    radio: "object" = None              # RadioProfile; typed loosely to avoid a cycle
    energy_j: float = 0.0
    step_cost_j: float = 0.001
    replay: Optional[ReplayBuffer] = None
    gating: str = "context"             # "context" or "off"
    update_count: int = 0
    skipped_updates: int = 0
    bytes_tx: int = 0
    bytes_rx: int = 0
    alive: bool = True
    sleeping: bool = False
    adversary: Optional[str] = None     # e.g. "garbage"
    total_spent_j: float = 0.0
    hosted: list = field(default_factory=list)       # HostedEntries parked by peers
    energy_log: list = field(default_factory=list)   # (tick, kind, joules), + = spend

    def __post_init__(self):
        if self.energy_j == 0.0:
            self.energy_j = self.capacity.battery_joules

    @property
    def energy_fraction(self) -> float:
        if self.capacity.battery_joules <= 0:
            return 0.0
        return min(1.0, max(0.0, self.energy_j / self.capacity.battery_joules))

    def spend(self, tick: int, kind: str, joules: float) -> None:
        self.energy_j -= joules
        self.total_spent_j += joules
        self.energy_log.append((tick, kind, joules))

    def harvest(self, tick: int, joules: float) -> None:
        # Cap at battery capacity; book only what was actually stored.
        gained = min(joules, self.capacity.battery_joules - self.energy_j)
        if gained > 0:
            self.energy_j += gained
            self.energy_log.append((tick, "harvest", -gained))

    def free_bytes(self) -> int:
        used = sum(h.bytes_used for h in self.hosted)
        if self.replay is not None:
            used += self.replay.bytes_used
        return max(0, self.capacity.memory_bytes - used)

    def degree(self) -> int:
        return getattr(self, "_degree", 0)
