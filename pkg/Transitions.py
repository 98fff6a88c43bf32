#!/usr/bin/env python3
"""
Transition records and the bounded FIFO replay buffer.
"""
import threading
from collections import namedtuple, Counter

import numpy as np
import torch

from ContainerIO import write_container, read_container, save_arrays, load_arrays

__all__ = [
    "Provenance", "Transition", "ReplayBuffer", "EmptyBuffer", "collate_transitions"
]

class EmptyBuffer(Exception):
    """Raised when sampling from a replay buffer without transitions"""
    pass

class Provenance(object):
    Real = "real"
    Synthetic = "synthetic"

Transition = namedtuple("Transition", ["obs", "action", "reward", "next_obs", "done", "provenance"])

def collate_transitions(transitions, continuous=True) -> dict:
    """
    Stack a list of transitions into batch tensors.
    """
    obs = torch.stack([torch.as_tensor(t.obs) for t in transitions]).float()
    next_obs = torch.stack([torch.as_tensor(t.next_obs) for t in transitions]).float()
    if continuous:
        actions = torch.stack([torch.as_tensor(t.action, dtype=torch.float32).reshape(-1) for t in transitions])
    else:
        actions = torch.as_tensor([int(t.action) for t in transitions], dtype=torch.long)
    rewards = torch.as_tensor([float(t.reward) for t in transitions], dtype=torch.float32)
    dones = torch.as_tensor([float(t.done) for t in transitions], dtype=torch.float32)
    return {"obs": obs, "actions": actions, "rewards": rewards, "next_obs": next_obs, "dones": dones}

class ReplayBuffer(object):
    """
    Bounded FIFO of Transition records with uniform sampling.
    push() and sample() are serialized by a lock.
    """
    def __init__(self, capacity=100000, seed=0):
        if capacity < 1:
            raise ValueError(f"Replay capacity must be >= 1, got {capacity}")
        self.capacity = int(capacity)
        self._storage = [None] * self.capacity
        self._episodes = [None] * self.capacity
        self._start = 0
        self._size = 0
        self._lock = threading.Lock()
        self.rng = np.random.default_rng(seed)

    def __len__(self):
        return self._size

    def _physical(self, logical):
        return (self._start + logical) % self.capacity

    def push(self, transition: Transition, episode=None):
        with self._lock:
            if self._size < self.capacity:
                index = self._physical(self._size)
                self._size += 1
            else: # Overwrite the oldest record
                index = self._start
                self._start = (self._start + 1) % self.capacity
            self._storage[index] = transition
            self._episodes[index] = episode

    def extend(self, transitions, episode=None):
        for transition in transitions:
            self.push(transition, episode=episode)

    def __getitem__(self, logical):
        if not 0 <= logical < self._size:
            raise IndexError(logical)
        return self._storage[self._physical(logical)]

    def transitions(self):
        return [self[i] for i in range(self._size)]

    @property
    def provenance_counts(self) -> Counter:
        return Counter(self[i].provenance for i in range(self._size))

    def sample(self, batch_size) -> list:
        """
        Uniformly sample batch_size transitions (with replacement).
        Provenance does not influence sampling.
        """
        with self._lock:
            if self._size == 0:
                raise EmptyBuffer("Cannot sample from an empty replay buffer")
            indices = self.rng.integers(0, self._size, size=int(batch_size))
            return [self._storage[self._physical(int(i))] for i in indices]

    def sequence_starts(self, length):
        """
        Logical indices j such that transitions j..j+length-1 belong to the same
        episode and only the last one may be terminal.
        """
        starts = []
        for j in range(self._size - length + 1):
            episode = self._episodes[self._physical(j)]
            if episode is None:
                continue
            ok = True
            for k in range(length):
                index = self._physical(j + k)
                if self._episodes[index] != episode or (k < length - 1 and self._storage[index].done):
                    ok = False
                    break
            if ok:
                starts.append(j)
        return starts

    def sample_start_indices(self, batch_size, starts) -> np.ndarray:
        """Uniformly choose batch_size entries of starts (with replacement)"""
        if len(starts) == 0:
            raise EmptyBuffer("No within-episode sequences in the buffer")
        chosen = self.rng.integers(0, len(starts), size=int(batch_size))
        return np.asarray(starts, dtype=np.int64)[chosen]

    def sample_sequences(self, batch_size, length, starts=None) -> list:
        """
        Sample batch_size contiguous within-episode sequences of the given length.
        Returns a list of lists of transitions.
        """
        if starts is None:
            starts = self.sequence_starts(length)
        if len(starts) == 0:
            raise EmptyBuffer(f"No within-episode sequences of length {length} in the buffer")
        return [[self[int(start) + k] for k in range(length)] for start in self.sample_start_indices(batch_size, starts)]

    def save(self, filename, env_spec=None):
        """
        Snapshot: one record per transition plus a header with counts per provenance.
        """
        transitions = self.transitions()
        arrays = {}
        if transitions:
            arrays = dict(
                obs=np.stack([np.asarray(t.obs, dtype=np.float32) for t in transitions]),
                next_obs=np.stack([np.asarray(t.next_obs, dtype=np.float32) for t in transitions]),
                action=np.stack([np.asarray(t.action, dtype=np.float32).reshape(-1) for t in transitions]),
                reward=np.asarray([t.reward for t in transitions], dtype=np.float64),
                done=np.asarray([t.done for t in transitions], dtype=bool),
                provenance=np.asarray([t.provenance for t in transitions]),
                episode=np.asarray([-1 if e is None else e for e in
                                    [self._episodes[self._physical(i)] for i in range(self._size)]], dtype=np.int64),
            )
        metadata = {
            "capacity": self.capacity,
            "size": self._size,
            "counts": dict(self.provenance_counts),
        }
        return write_container(filename, "replay", {}, env_spec=env_spec, metadata=metadata,
                               extras={"records.npz": save_arrays(**arrays)})

    @staticmethod
    def load(filename, continuous=True, expected_env_spec=None, seed=0) -> "ReplayBuffer":
        container = read_container(filename, kind="replay", expected_env_spec=expected_env_spec)
        buffer = ReplayBuffer(container.metadata["capacity"], seed=seed)
        arrays = load_arrays(container.extras["records.npz"])
        for i in range(container.metadata["size"]):
            action = arrays["action"][i] if continuous else int(arrays["action"][i][0])
            episode = int(arrays["episode"][i])
            buffer.push(Transition(arrays["obs"][i], action, float(arrays["reward"][i]),
                                   arrays["next_obs"][i], bool(arrays["done"][i]), str(arrays["provenance"][i])),
                        episode=None if episode < 0 else episode)
        return buffer
