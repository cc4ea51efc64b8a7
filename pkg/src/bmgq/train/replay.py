"""Fixed-capacity ring-buffer replay memory backed by preallocated arrays."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..sim.engine import Experience


@dataclass
class Batch:
    state: np.ndarray
    neighbours: np.ndarray
    n_real: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_state: np.ndarray
    next_neighbours: np.ndarray
    next_n_real: np.ndarray
    next_candidates: np.ndarray
    n_candidates: np.ndarray
    terminal: np.ndarray
    index: np.ndarray  # insertion serial numbers

    def __len__(self):
        return self.state.shape[0]


class ReplayMemory:
    def __init__(self, capacity: int, in_dim: int, n_slots: int, max_candidates: int = 5):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.max_candidates = max_candidates
        c, f, s, m = capacity, in_dim, n_slots, max_candidates
        self.state = np.zeros((c, f))
        self.neighbours = np.zeros((c, s, f))
        self.n_real = np.zeros(c, dtype=np.int64)
        self.action = np.zeros(c, dtype=np.int64)
        self.reward = np.zeros(c)
        self.next_state = np.zeros((c, f))
        self.next_neighbours = np.zeros((c, s, f))
        self.next_n_real = np.zeros(c, dtype=np.int64)
        self.next_candidates = np.zeros((c, m, f))
        self.n_candidates = np.zeros(c, dtype=np.int64)
        self.terminal = np.zeros(c, dtype=bool)
        self.serial = np.full(c, -1, dtype=np.int64)
        self.size = 0
        self.inserted = 0

    def __len__(self):
        return self.size

    def push(self, e: Experience) -> None:
        i = self.inserted % self.capacity
        self.state[i] = e.state
        s = self.neighbours.shape[1]
        if s:
            self.neighbours[i] = e.neighbours[:s]
            self.next_neighbours[i] = e.next_neighbours[:s]
        self.n_real[i] = e.n_real
        self.action[i] = e.action
        self.reward[i] = e.reward
        self.next_state[i] = e.next_state
        self.next_n_real[i] = e.next_n_real
        nc = min(len(e.next_candidates), self.max_candidates)
        self.next_candidates[i] = 0.0
        if nc:
            self.next_candidates[i, :nc] = e.next_candidates[:nc]
        self.n_candidates[i] = nc
        self.terminal[i] = e.terminal
        self.serial[i] = self.inserted
        self.inserted += 1
        self.size = min(self.size + 1, self.capacity)

    def extend(self, experiences) -> None:
        for e in experiences:
            self.push(e)

    def take(self, idx: np.ndarray) -> Batch:
        return Batch(self.state[idx], self.neighbours[idx], self.n_real[idx], self.action[idx], self.reward[idx],
                     self.next_state[idx], self.next_neighbours[idx], self.next_n_real[idx],
                     self.next_candidates[idx], self.n_candidates[idx], self.terminal[idx], self.serial[idx])

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        """Uniform sample without replacement."""
        if batch_size > self.size:
            raise ValueError(f"cannot sample {batch_size} from {self.size} experiences")
        return self.take(rng.choice(self.size, size=batch_size, replace=False))
