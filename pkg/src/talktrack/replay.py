"""FIFO replay buffer of experience tuples.

Each transition carries the allowed-action mask of the *next* state so TD
targets can bootstrap only over actions the agent could actually take there.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class Transition:
    state_enc: np.ndarray
    action_index: int
    reward: float
    next_state_enc: np.ndarray
    done: bool
    allowed_mask_next: tuple[int, ...]

    def __post_init__(self):
        if self.action_index < 0:
            raise ValueError("action_index must be non-negative")
        if not self.done and not self.allowed_mask_next:
            raise ValueError("non-terminal transition needs a non-empty next mask")


class ReplayBuffer:
    """Ring buffer with strictly FIFO eviction and uniform sampling."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._ring: list[Transition] = []
        self._cursor = 0
        self.insertion_count = 0

    def __len__(self) -> int:
        return len(self._ring)

    def push(self, transition: Transition) -> None:
        if len(self._ring) < self.capacity:
            self._ring.append(transition)
        else:
            self._ring[self._cursor] = transition
            self._cursor = (self._cursor + 1) % self.capacity
        self.insertion_count += 1

    def contents(self) -> list[Transition]:
        """Buffered transitions oldest-first."""
        if len(self._ring) < self.capacity:
            return list(self._ring)
        return self._ring[self._cursor :] + self._ring[: self._cursor]

    def sample_uniform(self, n: int, rng: np.random.Generator) -> list[Transition]:
        """n i.i.d. uniform draws with replacement."""
        if not self._ring:
            raise DataError("cannot sample from an empty replay buffer")
        indices = rng.integers(0, len(self._ring), size=n)
        return [self._ring[i] for i in indices]
