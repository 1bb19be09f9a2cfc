"""Proportional prioritized replay backed by a sum-tree."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError
from .graph import StateGraph

PRIORITY_FLOOR = 1e-5


@dataclass(frozen=True)
class Transition:
    s: StateGraph
    actions: dict[int, int]
    s_next: StateGraph
    rewards: dict[int, float]
    done: bool
    next_masks: dict[int, np.ndarray]

    def __post_init__(self):
        live = set(self.s.agent_ids)
        if set(self.actions) != live or set(self.rewards) != live:
            raise ContractError("actions and rewards must cover exactly the live agents of s")


class SumTree:
    """Binary tree whose internal nodes hold the sum of their children.

    Leaves sit at ``capacity .. 2*capacity-1``; node 1 is the root. Parents
    are recomputed from their children on every update, so sums never drift.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = 1 << (capacity - 1).bit_length()
        self.nodes = np.zeros(2 * self.capacity, dtype=np.float64)

    @property
    def total(self) -> float:
        return float(self.nodes[1])

    def leaves(self) -> np.ndarray:
        return self.nodes[self.capacity:]

    def update(self, leaf: int, value: float) -> None:
        i = leaf + self.capacity
        self.nodes[i] = value
        i //= 2
        while i >= 1:
            self.nodes[i] = self.nodes[2 * i] + self.nodes[2 * i + 1]
            i //= 2

    def rebuild(self) -> None:
        for i in range(self.capacity - 1, 0, -1):
            self.nodes[i] = self.nodes[2 * i] + self.nodes[2 * i + 1]

    def find(self, mass: np.ndarray) -> np.ndarray:
        """Leaf index holding each cumulative ``mass`` in ``[0, total)``."""
        mass = np.asarray(mass, dtype=np.float64).copy()
        idx = np.ones(mass.shape, dtype=np.int64)
        while idx[0] < self.capacity:
            left = 2 * idx
            lsum = self.nodes[left]
            go_right = mass >= lsum
            mass = np.where(go_right, mass - lsum, mass)
            idx = np.where(go_right, left + 1, left)
        return idx - self.capacity


class PrioritizedReplay:
    """Ring buffer sampled with probability ``p_i**alpha / sum_k p_k**alpha``.

    ``push`` returns a monotonically increasing id; ids of overwritten
    entries become stale and their priority updates are ignored.
    """

    def __init__(self, capacity: int, alpha: float = 0.6):
        self.capacity = capacity
        self.alpha = alpha
        self.tree = SumTree(capacity)
        self.raw = np.zeros(capacity, dtype=np.float64)
        self.ids = np.full(capacity, -1, dtype=np.int64)
        self.items: list[Transition | None] = [None] * capacity
        self.pushed = 0

    def __len__(self) -> int:
        return min(self.pushed, self.capacity)

    def max_priority(self) -> float:
        return float(self.raw[:len(self)].max()) if len(self) else 1.0

    def push(self, t: Transition) -> int:
        p = self.max_priority()
        slot = self.pushed % self.capacity
        self.items[slot] = t
        self.ids[slot] = self.pushed
        self._set(slot, p)
        self.pushed += 1
        return self.pushed - 1

    def _set(self, slot: int, p: float) -> None:
        self.raw[slot] = p
        self.tree.update(slot, p ** self.alpha)

    def _reweight(self, alpha: float) -> None:
        self.alpha = alpha
        n = len(self)
        self.tree.nodes[:] = 0.0
        self.tree.nodes[self.tree.capacity:self.tree.capacity + n] = self.raw[:n] ** alpha
        self.tree.rebuild()

    def probabilities(self) -> np.ndarray:
        n = len(self)
        w = self.tree.leaves()[:n]
        return w / w.sum()

    def sample(self, batch_size: int, alpha: float | None = None, beta: float = 0.4,
               rng: np.random.Generator | None = None
               ) -> tuple[list[Transition], np.ndarray, np.ndarray]:
        """Stratified draw of ``batch_size`` transitions.

        Returns the transitions, importance weights normalized so the largest
        is 1, and their ids for ``update_priorities``.
        """
        n = len(self)
        if n == 0:
            raise ContractError("cannot sample from an empty replay buffer")
        if batch_size > n:
            raise ContractError(f"batch of {batch_size} requested from {n} transitions")
        if alpha is not None and alpha != self.alpha:
            self._reweight(alpha)
        rng = rng or np.random.default_rng()
        total = self.tree.total
        seg = total / batch_size
        mass = (np.arange(batch_size) + rng.random(batch_size)) * seg
        mass = np.minimum(mass, np.nextafter(total, 0.0))
        slots = np.minimum(self.tree.find(mass), n - 1)
        probs = self.tree.leaves()[slots] / total
        w = (n * probs) ** (-beta)
        w = w / w.max()
        return [self.items[s] for s in slots], w, self.ids[slots].copy()

    def update_priorities(self, ids: Sequence[int], td_errors: Sequence[float]) -> None:
        for i, d in zip(ids, td_errors):
            slot = int(i) % self.capacity
            if self.ids[slot] != int(i):
                continue
            self._set(slot, abs(float(d)) + PRIORITY_FLOOR)
