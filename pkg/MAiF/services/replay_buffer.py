import threading
from typing import List, NamedTuple, Optional, Tuple

import numpy as np

from core.errors import ContractViolation


class Transition(NamedTuple):
    """One decision step of an agent group (a single agent, or all agents under VDN)."""
    obs: Tuple[np.ndarray, ...]
    actions: Tuple[int, ...]
    reward: float
    next_obs: Tuple[np.ndarray, ...]
    next_allowed: Tuple[Tuple[int, ...], ...]
    done: bool


class ReplayBuffer:
    """Fixed-capacity FIFO ring with uniform sampling.

    ``append`` is serialized by a lock so several collectors can feed one
    learner.
    """

    def __init__(self, capacity: int = 100_000):
        if capacity < 1:
            raise ContractViolation("replay capacity must be positive")
        self.capacity = int(capacity)
        self._items: List[Optional[Transition]] = []
        self._next = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._items)

    def append(self, transition: Transition) -> None:
        with self._lock:
            if len(self._items) < self.capacity:
                self._items.append(transition)
            else:
                self._items[self._next] = transition
            self._next = (self._next + 1) % self.capacity

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if batch_size > len(self._items):
            raise ContractViolation(f"cannot sample {batch_size} from {len(self._items)} transitions")
        return rng.choice(len(self._items), size=batch_size, replace=False)

    def sample(self, batch_size: int, rng: np.random.Generator) -> List[Transition]:
        return [self._items[i] for i in self.sample_indices(batch_size, rng)]
