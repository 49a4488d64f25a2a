from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mh_losses import Minibatch
from networks import JointSpec

DEFAULT_CAPACITY = 50_000


class ReplayBufferError(ValueError):
    """Transition does not fit the buffer, or the buffer cannot serve a sample."""


@dataclass(frozen=True)
class Transition:
    obs: np.ndarray
    act: np.ndarray
    rew: np.ndarray
    next_obs: np.ndarray
    done: bool


class ReplayBuffer:
    """Fixed-capacity ring of joint transitions with uniform sampling (with replacement)."""

    def __init__(self, joint: JointSpec, capacity: int = DEFAULT_CAPACITY):
        if capacity < 1:
            raise ReplayBufferError(f"capacity must be >= 1, got {capacity}")
        self.joint = joint
        self.capacity = capacity
        self.count = 0
        self._obs = np.zeros((capacity, joint.total_obs))
        self._act = np.zeros((capacity, joint.total_act))
        self._rew = np.zeros((capacity, joint.n_agents))
        self._next_obs = np.zeros((capacity, joint.total_obs))
        self._done = np.zeros(capacity, dtype=bool)

    def __len__(self) -> int:
        return min(self.count, self.capacity)

    def push(self, t: Transition):
        """Append; once full, the oldest record is overwritten."""
        expected = {
            "obs": (self.joint.total_obs,),
            "act": (self.joint.total_act,),
            "rew": (self.joint.n_agents,),
            "next_obs": (self.joint.total_obs,),
        }
        for name, shape in expected.items():
            got = np.shape(getattr(t, name))
            if got != shape:
                raise ReplayBufferError(f"transition field {name} has shape {got}, expected {shape}")
        if not np.all(np.isfinite(t.rew)):
            raise ReplayBufferError(f"non-finite reward {t.rew}")

        slot = self.count % self.capacity
        self._obs[slot] = t.obs
        self._act[slot] = t.act
        self._rew[slot] = t.rew
        self._next_obs[slot] = t.next_obs
        self._done[slot] = bool(t.done)
        self.count += 1

    def get(self, k: int) -> Transition:
        """k-th stored record, 0 being the oldest still held."""
        size = len(self)
        if not 0 <= k < size:
            raise IndexError(f"record {k} out of range for {size} stored")
        slot = (self.count - size + k) % self.capacity
        return Transition(self._obs[slot].copy(), self._act[slot].copy(), self._rew[slot].copy(),
                          self._next_obs[slot].copy(), bool(self._done[slot]))

    def sample(self, batch_size: int, rng: np.random.Generator, allow_short: bool = False) -> Minibatch:
        """Draw `batch_size` indices uniformly with replacement.

        Training never samples before the buffer holds a full batch; pass
        `allow_short` to draw from fewer (but at least one) stored records.
        """
        size = len(self)
        if batch_size < 1:
            raise ReplayBufferError(f"batch size must be >= 1, got {batch_size}")
        if size == 0 or (size < batch_size and not allow_short):
            raise ReplayBufferError(f"buffer holds {size} records, cannot sample {batch_size}")
        idx = rng.integers(0, size, size=batch_size)
        return Minibatch(self._obs[idx], self._act[idx], self._rew[idx], self._next_obs[idx], self._done[idx])
