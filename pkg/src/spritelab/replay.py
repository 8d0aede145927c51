"""Replay buffers: proportional prioritized replay on a sum tree, and a
uniform FIFO buffer. Both evict oldest-first once full and serialise access
through a lock so actor threads can append while a learner samples."""

from __future__ import annotations

import threading
from typing import Optional

import numpy as np


class SumTree:
    """Binary tree in an array; each parent holds the sum of its children.

    Leaves sit at [capacity - 1, 2 * capacity - 1).
    """

    def __init__(self, capacity: int):
        self.capacity = int(capacity)
        self.nodes = np.zeros(2 * self.capacity - 1)

    @property
    def total(self) -> float:
        return float(self.nodes[0])

    def update(self, data_idx: int, value: float):
        idx = data_idx + self.capacity - 1
        change = value - self.nodes[idx]
        self.nodes[idx] = value
        while idx > 0:
            idx = (idx - 1) // 2
            self.nodes[idx] += change

    def leaf(self, data_idx: int) -> float:
        return float(self.nodes[data_idx + self.capacity - 1])

    def find(self, cumsum: float) -> int:
        """Data index whose cumulative-priority interval contains `cumsum`."""
        idx = 0
        while 2 * idx + 1 < len(self.nodes):
            left = 2 * idx + 1
            if cumsum < self.nodes[left] or self.nodes[left + 1] <= 0.0:
                idx = left
            else:
                cumsum -= self.nodes[left]
                idx = left + 1
        return idx - (self.capacity - 1)


class _Storage:
    def __init__(self, capacity: int):
        self.capacity = int(capacity)
        self.fields: dict[str, np.ndarray] = {}
        self.size = 0
        self.cursor = 0

    def put(self, record: dict) -> int:
        if not self.fields:
            for k, v in record.items():
                if isinstance(v, np.ndarray) or np.isscalar(v):
                    v = np.asarray(v)
                    self.fields[k] = np.zeros((self.capacity, *v.shape), dtype=v.dtype)
                else:
                    self.fields[k] = np.empty(self.capacity, dtype=object)
        idx = self.cursor
        for k, store in self.fields.items():
            if store.dtype == object:
                store[idx] = record[k]
            else:
                store[idx] = record[k]
        self.cursor = (self.cursor + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        return idx

    def get(self, indices) -> dict:
        return {k: v[indices] for k, v in self.fields.items()}


class PrioritizedReplay:
    def __init__(self, capacity: int = 100_000, alpha: float = 1.0, beta: float = 1.0,
                 min_priority: float = 1e-6):
        self.capacity = int(capacity)
        self.alpha, self.beta = alpha, beta
        self.min_priority = min_priority
        self.tree = SumTree(self.capacity)
        self.priorities = np.zeros(self.capacity)
        self.max_priority = 1.0
        self._storage = _Storage(self.capacity)
        self.lock = threading.Lock()

    def __len__(self):
        return self._storage.size

    def _tree_value(self, priority: float) -> float:
        return max(priority, self.min_priority) ** self.alpha

    def add(self, record: dict, priority: Optional[float] = None) -> int:
        """Store a record; unseen records get the current maximum priority."""
        with self.lock:
            p = self.max_priority if priority is None else float(priority)
            idx = self._storage.put(record)
            self.priorities[idx] = p
            self.tree.update(idx, self._tree_value(p))
            self.max_priority = max(self.max_priority, p)
            return idx

    def probabilities(self, indices) -> np.ndarray:
        leaves = np.array([self.tree.leaf(i) for i in np.atleast_1d(indices)])
        return leaves / self.tree.total

    def importance_weights(self, indices, normalize: bool = True) -> np.ndarray:
        """(N p_i)^-beta, divided by the largest weight among `indices`.

        Normalising within the batch keeps every batch's largest weight at 1.
        Normalising by the buffer-wide maximum instead lets near-zero-priority
        records (transitions the model already predicts exactly) shrink all
        other weights by many orders of magnitude, which stalls Adam.
        """
        n = len(self)
        w = (n * self.probabilities(indices)) ** (-self.beta)
        if normalize:
            w = w / w.max()
        return w

    def sample(self, batch_size: int, rng: np.random.Generator):
        """Stratified proportional sampling -> (indices, records, weights)."""
        with self.lock:
            if len(self) == 0:
                raise ValueError("cannot sample from an empty replay")
            bounds = np.linspace(0.0, self.tree.total, batch_size + 1)
            targets = rng.uniform(bounds[:-1], bounds[1:])
            idx = np.array([self.tree.find(t) for t in targets])
            idx = np.minimum(idx, len(self) - 1)
            return idx, self._storage.get(idx), self.importance_weights(idx)

    def sample_uniform(self, batch_size: int, rng: np.random.Generator):
        with self.lock:
            idx = rng.integers(0, len(self), size=batch_size)
            return idx, self._storage.get(idx)

    def update_priorities(self, indices, priorities):
        with self.lock:
            for i, p in zip(np.atleast_1d(indices), np.atleast_1d(priorities)):
                p = float(p)
                if not np.isfinite(p):
                    raise FloatingPointError(f"non-finite priority for record {i}")
                self.priorities[i] = p
                self.tree.update(int(i), self._tree_value(p))
                self.max_priority = max(self.max_priority, p)


class UniformReplay:
    def __init__(self, capacity: int = 50_000):
        self.capacity = int(capacity)
        self._storage = _Storage(self.capacity)
        self.lock = threading.Lock()

    def __len__(self):
        return self._storage.size

    def add(self, record: dict) -> int:
        with self.lock:
            return self._storage.put(record)

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict:
        with self.lock:
            if len(self) == 0:
                raise ValueError("cannot sample from an empty replay")
            idx = rng.integers(0, len(self), size=batch_size)
            return self._storage.get(idx)
