"""Sliding-window epoch scheduling.

Turns user sequences plus a training-regime policy into per-epoch streams of
fixed-size windows. Regimes: control (one recent window per user), all_sliding
(strided windows over the whole history), mixed (alternating recent/sliding
epochs with a finite lookback cap).

Window enumeration is end-aligned: ends run e_j = n - j*s from the most
recent event backwards, so the freshest context is trained on at every
stride. Windows never extend past the lookback suffix; enumeration stops
when a window could no longer span min(T, n') events from the suffix.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

MODES = ("control", "all_sliding", "mixed")

UNBOUNDED = math.inf


@dataclass(frozen=True)
class WindowPolicy:
    mode: str
    window_size: int
    stride: int = 1
    lookback: float = UNBOUNDED  # finite int for mixed; ignored for control

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.window_size < 2:
            raise ValueError(f"window_size must be >= 2, got {self.window_size}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.mode == "mixed":
            if not (self.lookback != UNBOUNDED and self.lookback >= self.window_size):
                raise ValueError(
                    "mixed mode requires a finite lookback >= window_size, "
                    f"got lookback={self.lookback}, window_size={self.window_size}"
                )
            if self.lookback != int(self.lookback):
                raise ValueError(f"lookback must be integral, got {self.lookback}")
        if self.mode == "all_sliding" and self.lookback != UNBOUNDED:
            raise ValueError("all_sliding uses an unbounded lookback")

    def label(self) -> str:
        if self.mode == "control":
            return "Control"
        if self.mode == "all_sliding":
            return "All-Sliding" if self.stride == 1 else f"All-Sliding + Stride = {self.stride}"
        return f"Mixed-{int(self.lookback)}"


@dataclass(frozen=True)
class Window:
    user: int
    start: int
    end: int
    pad: int

    def __post_init__(self):
        if not (0 <= self.start < self.end):
            raise ValueError(f"bad window bounds [{self.start}, {self.end})")
        if self.pad < 0:
            raise ValueError("negative pad")


def mixed_schedule(total_epochs: int) -> list[str]:
    """Alternating per-epoch flags, starting recent: [recent, sliding, ...]."""
    if total_epochs < 1:
        raise ValueError("total_epochs must be >= 1")
    return ["recent" if e % 2 == 0 else "sliding" for e in range(total_epochs)]


def is_sliding_epoch(policy: WindowPolicy, epoch: int) -> bool:
    if policy.mode == "control":
        return False
    if policy.mode == "all_sliding":
        return True
    return epoch % 2 == 1  # mixed: epoch 0 recent, 1 sliding, ...


def recent_window(n: int, window_size: int) -> tuple[int, int]:
    return (max(0, n - window_size), n)


def sliding_windows(n: int, window_size: int, stride: int, lookback: float) -> list[tuple[int, int]]:
    """Strided end-aligned windows over the lookback suffix of a length-n
    sequence, most recent first."""
    if n < 2:
        return []
    n_eff = n if lookback == UNBOUNDED else min(n, int(lookback))
    base = n - n_eff
    need = min(window_size, n_eff)
    out = []
    j = 0
    while True:
        end = n - j * stride
        if end - base < need:
            break
        out.append((max(base, end - window_size), end))
        j += 1
    return out


def enumerate_windows(n: int, policy: WindowPolicy, epoch: int) -> list[tuple[int, int]]:
    """All (start, end) training windows for one user sequence this epoch."""
    if n < 2:
        return []
    if is_sliding_epoch(policy, epoch):
        return sliding_windows(n, policy.window_size, policy.stride, policy.lookback)
    return [recent_window(n, policy.window_size)]


def window_count(n: int, policy: WindowPolicy, epoch: int) -> int:
    """Closed-form count matching enumerate_windows."""
    if n < 2:
        return 0
    if not is_sliding_epoch(policy, epoch):
        return 1
    n_eff = n if policy.lookback == UNBOUNDED else min(n, int(policy.lookback))
    if n_eff <= policy.window_size:
        return 1
    return (n_eff - policy.window_size) // policy.stride + 1


@dataclass
class WindowPlan:
    """Shuffled window stream for one epoch, stored as parallel arrays."""

    users: np.ndarray  # int32 user index
    starts: np.ndarray  # int32
    ends: np.ndarray  # int32
    window_size: int
    epoch: int
    flag: str  # "recent" or "sliding"

    def __len__(self) -> int:
        return len(self.users)

    def __iter__(self) -> Iterator[Window]:
        T = self.window_size
        for u, s, e in zip(self.users, self.starts, self.ends):
            yield Window(int(u), int(s), int(e), T - int(e - s))


def epoch_plan(lengths: Sequence[int], policy: WindowPolicy, epoch: int,
               shuffle_seed: int) -> WindowPlan:
    """Deterministic shuffled plan of every window from every user.

    The permutation is seeded by (shuffle_seed, epoch); identical inputs give
    an identical stream regardless of how the plan is later consumed.
    """
    users: list[np.ndarray] = []
    starts: list[int] = []
    ends: list[int] = []
    sliding = is_sliding_epoch(policy, epoch)
    for u, n in enumerate(lengths):
        wins = enumerate_windows(int(n), policy, epoch)
        if not wins:
            continue
        users.append(np.full(len(wins), u, dtype=np.int32))
        for s, e in wins:
            starts.append(s)
            ends.append(e)
    if users:
        ua = np.concatenate(users)
        sa = np.asarray(starts, dtype=np.int32)
        ea = np.asarray(ends, dtype=np.int32)
    else:
        ua = np.empty(0, dtype=np.int32)
        sa = np.empty(0, dtype=np.int32)
        ea = np.empty(0, dtype=np.int32)
    perm = np.random.default_rng([shuffle_seed & 0xFFFFFFFF, epoch]).permutation(len(ua))
    return WindowPlan(ua[perm], sa[perm], ea[perm], policy.window_size, epoch,
                      "sliding" if sliding else "recent")


def total_windows(lengths: Sequence[int], policy: WindowPolicy, epochs: int) -> int:
    """Window-count accounting across a whole run; the training-cost predictor."""
    return sum(
        window_count(int(n), policy, e) for e in range(epochs) for n in lengths
    )
