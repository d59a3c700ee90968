"""Deterministic counter-based random streams.

Every random draw in this package comes from a keyed SplitMix64 sequence.
A stream is addressed by (master_seed, task, purpose); each draw call
derives a fresh 64-bit base key with SHA-256 from
``"{master_seed}:{task}:{purpose}:{call_counter}"`` and produces its values
as SplitMix64 outputs at positions 0..n-1 under that key.  The same
(master seed, task, purpose, counter) therefore yields the same bits on
every platform, and a stream's entire state is one integer counter.

SplitMix64 constants are the published ones (Steele, Lea & Flood 2014, as
used in java.util.SplittableRandom).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
MIX1 = np.uint64(0xBF58476D1CE4E5B9)
MIX2 = np.uint64(0x94D049BB133111EB)

# Domain vocabulary.  Streams for a task never collide with another task's
# streams, and a purpose never collides with another purpose, so inserting
# or removing one task's requests cannot shift any other task's draws.
PURPOSES = (
    "param_init",     # fresh parameter values
    "score_init",     # mask score values / random mask bits
    "reinit_unused",  # post-learning reset of parameters outside the mask union
    "unlearn_reset",  # reset of an unlearned task's owned parameters
    "data_order",     # minibatch shuffling
    "buffer_sample",  # exemplar selection when filling a replay buffer
    "retrain_order",  # replay batch sampling
    "scenario",       # dataset + request-sequence generation
    "eval",           # random labels reported for unlearned tasks
)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * MIX1
    z = (z ^ (z >> np.uint64(27))) * MIX2
    return z ^ (z >> np.uint64(31))


def _base_key(master_seed: int, task: int, purpose: str, counter: int) -> np.uint64:
    raw = f"{master_seed}:{task}:{purpose}:{counter}".encode("ascii")
    return np.uint64(int.from_bytes(hashlib.sha256(raw).digest()[:8], "little"))


@dataclass
class RngStream:
    """One named random stream; mutable state is the call counter only."""

    master_seed: int
    task: int
    purpose: str
    counter: int = 0

    def __post_init__(self):
        if self.purpose not in PURPOSES:
            raise ValueError(f"unknown stream purpose {self.purpose!r}")

    def _block(self, n: int) -> np.ndarray:
        """Next n raw 64-bit values; one call consumes one counter tick."""
        base = _base_key(self.master_seed, self.task, self.purpose, self.counter)
        self.counter += 1
        idx = np.arange(n, dtype=np.uint64)
        return _mix64(base + idx * GOLDEN)

    def random(self, n: int) -> np.ndarray:
        """n doubles uniform on [0, 1) with 53-bit resolution."""
        return (self._block(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def uniform(self, low: float, high: float, n: int) -> np.ndarray:
        return low + (high - low) * self.random(n)

    def normal(self, n: int) -> np.ndarray:
        """n standard normal draws via Box-Muller."""
        m = (n + 1) // 2
        u = self.random(2 * m)
        r = np.sqrt(-2.0 * np.log1p(-u[:m]))  # 1-u in (0,1], no log(0)
        ang = 2.0 * np.pi * u[m:]
        return np.concatenate([r * np.cos(ang), r * np.sin(ang)])[:n]

    def randints(self, count: int, bound: int) -> np.ndarray:
        """count exact-uniform int64 values in [0, bound), by rejection."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        limit = (1 << 64) // bound * bound
        accept_all = limit == 1 << 64
        out = np.empty(count, dtype=np.int64)
        filled = 0
        while filled < count:
            v = self._block(count - filled + 8)
            if not accept_all:
                v = v[v < np.uint64(limit)]
            take = v[: count - filled]
            out[filled : filled + take.size] = (take % np.uint64(bound)).astype(np.int64)
            filled += take.size
        return out

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n) by sorting 64-bit keys."""
        return np.argsort(self._block(n), kind="stable").astype(np.int64)

    def subset(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), uniform without replacement."""
        if k > n:
            raise ValueError(f"cannot pick {k} of {n}")
        return self.permutation(n)[:k]


class StreamSet:
    """Lazily created streams for one master seed, keyed by (task, purpose)."""

    def __init__(self, master_seed: int, counters: dict | None = None):
        self.master_seed = int(master_seed)
        self._streams: dict[tuple[int, str], RngStream] = {}
        if counters:
            for (task, purpose), c in counters.items():
                self._streams[(task, purpose)] = RngStream(self.master_seed, task, purpose, c)

    def stream(self, task: int, purpose: str) -> RngStream:
        key = (task, purpose)
        if key not in self._streams:
            self._streams[key] = RngStream(self.master_seed, task, purpose)
        return self._streams[key]

    def counters(self) -> dict[tuple[int, str], int]:
        return {k: s.counter for k, s in self._streams.items() if s.counter}
