"""
Replay Buffer
Fixed-capacity FIFO store of complete episode histories with uniform minibatch sampling.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from core.exceptions import ConfigError, ContractError
from models.scan import ScanHistory

logger = logging.getLogger(__name__)


@dataclass
class ReplayEntry:
    history: ScanHistory
    image_index: int


@dataclass
class ReplayBatch:
    """A sampled minibatch laid out as [batch, T, ...] arrays"""
    image_indices: np.ndarray  # [N] int
    actions: np.ndarray        # [N, T, 2]
    observations: np.ndarray   # [N, T, samples]; row k is the segment observed after action k
    over_edge: np.ndarray      # [N, T] bool
    probe_positions: np.ndarray  # [N, T, samples, 2]

    @classmethod
    def from_entries(cls, entries: List[ReplayEntry]) -> "ReplayBatch":
        return cls(
            image_indices=np.array([e.image_index for e in entries], dtype=np.int64),
            actions=np.stack([e.history.actions for e in entries]),
            observations=np.stack([e.history.observations for e in entries]),
            over_edge=np.stack([e.history.over_edge for e in entries]),
            probe_positions=np.stack([e.history.probe_positions for e in entries]),
        )

    @property
    def size(self) -> int:
        return int(self.actions.shape[0])

    @property
    def steps(self) -> int:
        return int(self.actions.shape[1])

    def network_observations(self) -> np.ndarray:
        """Observation fed at step k: the previous segment, zeros at k = 0"""
        shifted = np.zeros_like(self.observations)
        shifted[:, 1:] = self.observations[:, :-1]
        return shifted

    def previous_actions(self) -> np.ndarray:
        shifted = np.zeros_like(self.actions)
        shifted[:, 1:] = self.actions[:, :-1]
        return shifted


class ReplayBuffer:
    """
    Ring storage: once full, each push overwrites the oldest slot. The slot layout is
    part of the checkpointed state, so sampling after a restore picks the same episodes.
    """

    def __init__(self, capacity: int, episode_length: int):
        if capacity < 1:
            raise ConfigError(f"replay capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.episode_length = episode_length
        self._slots: List[ReplayEntry] = []
        self._cursor = 0
        self.inserted = 0

    def __len__(self) -> int:
        return len(self._slots)

    def push(self, history: ScanHistory, image_index: int) -> None:
        if history.length != self.episode_length:
            raise ContractError(
                f"replay accepts complete episodes of {self.episode_length} steps, got {history.length}"
            )
        entry = ReplayEntry(history=history, image_index=int(image_index))
        if len(self._slots) < self.capacity:
            self._slots.append(entry)
        else:
            self._slots[self._cursor] = entry
        self._cursor = (self._cursor + 1) % self.capacity
        self.inserted += 1

    def sample(self, n: int, rng: np.random.Generator) -> Optional[List[ReplayEntry]]:
        """n distinct episodes drawn uniformly, or None while fewer than n are stored"""
        if n > len(self._slots):
            return None
        picks = rng.choice(len(self._slots), size=n, replace=False)
        return [self._slots[i] for i in picks]

    def sample_batch(self, n: int, rng: np.random.Generator) -> Optional[ReplayBatch]:
        entries = self.sample(n, rng)
        return ReplayBatch.from_entries(entries) if entries is not None else None

    def entries(self) -> List[ReplayEntry]:
        """Stored episodes in slot order"""
        return list(self._slots)

    @property
    def cursor(self) -> int:
        return self._cursor

    def restore(self, entries: List[ReplayEntry], cursor: int, inserted: int) -> None:
        if len(entries) > self.capacity:
            raise ContractError(f"{len(entries)} stored episodes exceed capacity {self.capacity}")
        self._slots = list(entries)
        self._cursor = cursor % self.capacity
        self.inserted = inserted
