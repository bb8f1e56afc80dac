"""Fading Replay Buffer.

A fixed-capacity store that is always full. Slots are addressed by logical
index: 0 is the oldest transition and ``capacity - 1`` the newest. Sampling
probabilities are a fixed function of the logical index. A push rolls the
store left and writes into the slot that arrives at the newest end; the roll
is a rotation of a base offset, so no data moves.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .math_core import ScheduleKind, weight_schedule

log = logging.getLogger(__name__)

DONE_EPS = 1e-3
FIELDS = ("state", "action", "reward", "done", "next_state")
MAGIC = b"FRB1"
_HEADER = struct.Struct("<4sQIIB")  # magic, capacity, obs_dim, action_dim, half


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float  # already divided by the reward normalizer
    done: float
    next_state: np.ndarray


@dataclass
class Batch:
    state: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    done: np.ndarray
    next_state: np.ndarray


def is_terminal(done) -> bool:
    return done >= 1.0 - DONE_EPS


class FadingReplayBuffer:
    def __init__(self, capacity: int, obs_dim: int, action_dim: int,
                 schedule: ScheduleKind | str = ScheduleKind.BUFFER, half: bool = False,
                 done_decay: bool = False):
        if capacity < 2:
            raise ValueError("capacity must be at least 2")
        self.capacity = int(capacity)
        self.obs_dim, self.action_dim = int(obs_dim), int(action_dim)
        self.done_decay = done_decay
        self.base = 0
        self.filled = False
        self.terminal_evictions = 0
        self.forced_evictions = 0
        self.decayed_evictions = 0
        self._dtype = np.float16 if half else np.float64
        self._alloc()
        self.set_schedule(schedule)

    def _alloc(self):
        n, dt = self.capacity, self._dtype
        self.state = np.zeros((n, self.obs_dim), dt)
        self.action = np.zeros((n, self.action_dim), dt)
        self.reward = np.zeros(n, dt)
        # done stays full precision: the terminal check and its decay need it
        self.done = np.zeros(n, np.float64)
        self.next_state = np.zeros((n, self.obs_dim), dt)

    @property
    def half(self) -> bool:
        return self._dtype == np.float16

    def __len__(self) -> int:
        return self.capacity if self.filled else 0

    def set_schedule(self, kind: ScheduleKind | str) -> None:
        self.schedule = weight_schedule(self.capacity, kind)
        cdf = np.cumsum(self.schedule.weights)
        cdf[-1] = 1.0
        self._cdf = cdf

    @property
    def probabilities(self) -> np.ndarray:
        return self.schedule.weights

    def set_precision(self, mode: str) -> None:
        """Switch storage to ``"half"`` or ``"full"``, converting stored data in place."""
        if mode not in ("half", "full"):
            raise ValueError("precision must be 'half' or 'full'")
        dt = np.float16 if mode == "half" else np.float64
        if dt == self._dtype:
            return
        for name in ("state", "action", "reward", "next_state"):
            setattr(self, name, getattr(self, name).astype(dt))
        self._dtype = dt

    # index helpers -------------------------------------------------------

    def physical(self, logical):
        return (self.base + np.asarray(logical)) % self.capacity

    def get(self, logical: int) -> Transition:
        i = int(self.physical(logical))
        return Transition(self.state[i].astype(np.float64), self.action[i].astype(np.float64),
                          float(self.reward[i]), float(self.done[i]),
                          self.next_state[i].astype(np.float64))

    def logical_view(self, name: str) -> np.ndarray:
        """A copy of one field in logical order (oldest first)."""
        return np.roll(getattr(self, name), -self.base, axis=0).astype(np.float64)

    def _write(self, i: int, t: Transition) -> None:
        self.state[i] = t.state
        self.action[i] = t.action
        self.reward[i] = t.reward
        self.done[i] = t.done
        self.next_state[i] = t.next_state

    # filling -------------------------------------------------------------

    def prefill(self, exploration: list[Transition], repeats: int) -> "FadingReplayBuffer":
        """Tile ``exploration`` ``repeats`` times, oldest tile at index 0."""
        n = len(exploration)
        if n * repeats != self.capacity:
            raise ValueError(f"{n} transitions x {repeats} repeats != capacity {self.capacity}")
        cols = {f: np.array([getattr(t, f) for t in exploration], dtype=np.float64) for f in FIELDS}
        for f in FIELDS:
            reps = (repeats,) + (1,) * (cols[f].ndim - 1)
            getattr(self, f)[...] = np.tile(cols[f], reps)
        self.base = 0
        self.filled = True
        return self

    def push(self, t: Transition) -> None:
        """Roll left, then write ``t`` into the slot that reached the last index.

        The roll is one position, or more when the oldest slots hold terminal
        transitions, so that terminals are carried to the recent end instead
        of becoming the overwrite target.
        """
        if not self.filled:
            raise RuntimeError("buffer must be prefilled before pushing")
        n = self.capacity
        preserved = 0
        while preserved < n - 1 and is_terminal(self.done[(self.base + preserved) % n]):
            preserved += 1
        if preserved > n // 2:
            log.warning("%d consecutive terminals exceed half the buffer; evicting the oldest", preserved)
            self.forced_evictions += 1
            preserved = 0
        if self.done_decay and preserved:
            idx = (self.base + np.arange(preserved)) % n
            self.done[idx] -= 2.0 * DONE_EPS
        self.base = (self.base + preserved + 1) % n
        target = int(self.physical(n - 1))
        if is_terminal(self.done[target]):
            self.terminal_evictions += 1
        elif self.done[target] > 0.0:
            # a terminal whose done flag decayed below the check
            self.decayed_evictions += 1
        self._write(target, t)

    # sampling ------------------------------------------------------------

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        """Logical indices drawn with replacement from the fixed schedule."""
        return np.searchsorted(self._cdf, rng.random(batch_size), side="right").clip(
            max=self.capacity - 1)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if batch_size > self.capacity:
            raise ValueError("batch larger than buffer")
        idx = self.physical(self.sample_indices(batch_size, rng))
        return Batch(
            self.state[idx].astype(np.float64),
            self.action[idx].astype(np.float64),
            self.reward[idx].astype(np.float64),
            self.done[idx].copy(),
            self.next_state[idx].astype(np.float64),
        )

    # snapshot ------------------------------------------------------------

    def save(self, path: str | Path) -> None:
        """Flat little-endian snapshot in logical order."""
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, self.capacity, self.obs_dim, self.action_dim, int(self.half)))
            dt = "<f2" if self.half else "<f8"
            for f in FIELDS:
                arr = np.roll(getattr(self, f), -self.base, axis=0)
                fh.write(arr.astype("<f8" if f == "done" else dt).tobytes())

    @classmethod
    def load(cls, path: str | Path, schedule: ScheduleKind | str = ScheduleKind.BUFFER,
             done_decay: bool = False) -> "FadingReplayBuffer":
        with open(path, "rb") as fh:
            raw = fh.read()
        if len(raw) < _HEADER.size:
            raise ValueError(f"{path}: truncated replay snapshot")
        magic, n, obs_dim, action_dim, half = _HEADER.unpack_from(raw)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        buf = cls(n, obs_dim, action_dim, schedule=schedule, half=bool(half), done_decay=done_decay)
        off = _HEADER.size
        dt = "<f2" if half else "<f8"
        for f in FIELDS:
            target = getattr(buf, f)
            d = np.dtype("<f8" if f == "done" else dt)
            count = target.size
            chunk = np.frombuffer(raw, dtype=d, count=count, offset=off)
            off += count * d.itemsize
            target[...] = chunk.reshape(target.shape)
        if off != len(raw):
            raise ValueError(f"{path}: trailing bytes in replay snapshot")
        buf.filled = True
        return buf
