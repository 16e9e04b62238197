"""Adaptive timeout estimation for group operations.

Each rank observes the empirical per-byte transfer cost of its recent
messages and derives a timeout proposal for the next message size.  A
coordinator takes the median across ranks and folds it into the canonical
timeout with an EWMA.  The first invocation of a collective runs with a
warm-up timeout and seeds the estimate from its measured duration.  A
canonical timeout is split into per-phase deadline slices: sequential
phases get proportional slices, operations inside a parallel phase share
the phase's full slice.
"""
from __future__ import annotations

import statistics
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction

from .core import SimTime, usec

DEFAULT_ALPHA = 0.2
DEFAULT_GAMMA = 0.25
DEFAULT_DELTA = usec(50)
HISTORY_LIMIT = 16


def aggregate(proposals: list[SimTime], t_old: SimTime,
              alpha: float = DEFAULT_ALPHA) -> SimTime:
    """EWMA of the median proposal into the previous timeout.

    Empty proposal lists leave the timeout unchanged.  Even-count median is
    the mean of the middle two.
    """
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    if not proposals:
        return t_old
    return round(alpha * statistics.median(proposals) + (1 - alpha) * t_old)


def initial(t_warmup: SimTime, gamma: float = DEFAULT_GAMMA,
            delta: SimTime = DEFAULT_DELTA) -> SimTime:
    """Timeout seeded from a warm-up run: (1 + gamma) * t_warmup + delta."""
    if t_warmup <= 0:
        raise ValueError(f"warmup duration must be positive, got {t_warmup}")
    return round((1 + gamma) * t_warmup) + delta


class PhaseKind(Enum):
    SEQUENTIAL = "sequential"
    PARALLEL = "parallel"


@dataclass(frozen=True)
class Phase:
    kind: PhaseKind
    weight: float = 1.0
    ops: int = 1  # concurrent operations sharing a parallel phase's slice


def split_budget(total: SimTime, phases: list[Phase]) -> list[SimTime]:
    """Per-phase deadline slices that sum to the total exactly.

    Proportional to weight, rounded by largest remainder in integer
    nanoseconds.  Every concurrent op of a parallel phase uses that phase's
    full slice, so the returned value is the per-op deadline either way.
    """
    if not phases:
        raise ValueError("phase list must not be empty")
    if total <= 0:
        raise ValueError(f"budget must be positive, got {total}")
    for i, ph in enumerate(phases):
        if ph.weight <= 0:
            raise ValueError(f"phase {i} weight must be positive, got {ph.weight}")
    weights = [Fraction(ph.weight).limit_denominator(10**9) for ph in phases]
    w_sum = sum(weights)
    exact = [Fraction(total) * w / w_sum for w in weights]
    slices = [int(x) for x in exact]
    shortfall = total - sum(slices)
    by_remainder = sorted(range(len(phases)), key=lambda i: (exact[i] - slices[i], -i),
                          reverse=True)
    for i in by_remainder[:shortfall]:
        slices[i] += 1
    assert sum(slices) == total
    return slices


@dataclass
class TimeoutModel:
    """Local estimator state for one (collective, group) key."""
    alpha: float = DEFAULT_ALPHA
    gamma: float = DEFAULT_GAMMA
    delta: SimTime = DEFAULT_DELTA
    per_byte_cost: float | None = None  # ns per byte, most recent observation
    t_current: SimTime | None = None
    history: deque = field(default_factory=lambda: deque(maxlen=HISTORY_LIMIT))

    def record(self, elapsed: SimTime, bytes_received: int) -> float | None:
        """Observe one completed transfer.  Zero received bytes carries no
        cost information and is skipped."""
        if bytes_received == 0:
            return None
        self.per_byte_cost = elapsed / bytes_received
        self.history.append((elapsed, bytes_received))
        return self.per_byte_cost

    def proposal(self, message_bytes: int) -> SimTime | None:
        """Timeout proposal for a message of the given size, or None before
        any observation exists."""
        if self.per_byte_cost is None:
            return None
        return max(1, round(self.per_byte_cost * message_bytes))

    def seed_warmup(self, t_warmup: SimTime) -> SimTime:
        self.t_current = initial(t_warmup, self.gamma, self.delta)
        return self.t_current

    def fold(self, proposals: list[SimTime]) -> SimTime:
        if self.t_current is None:
            raise RuntimeError("timeout not initialized; run a warmup first")
        self.t_current = aggregate(proposals, self.t_current, self.alpha)
        return self.t_current


class GroupEstimator:
    """Coordinator view: latest proposal per rank, folded on demand.

    Proposals arrive asynchronously; an aggregation round missing fresh
    values from some ranks reuses each absent rank's last known proposal.
    """

    def __init__(self, n_ranks: int, *, alpha: float = DEFAULT_ALPHA,
                 gamma: float = DEFAULT_GAMMA, delta: SimTime = DEFAULT_DELTA) -> None:
        if n_ranks < 1:
            raise ValueError(f"need at least one rank, got {n_ranks}")
        self.n_ranks = n_ranks
        self.model = TimeoutModel(alpha=alpha, gamma=gamma, delta=delta)
        self._latest: dict[int, SimTime] = {}

    def submit(self, rank: int, proposal: SimTime) -> None:
        if not 0 <= rank < self.n_ranks:
            raise ValueError(f"rank {rank} outside group of {self.n_ranks}")
        if proposal > 0:
            self._latest[rank] = proposal

    def seed_warmup(self, t_warmup: SimTime) -> SimTime:
        return self.model.seed_warmup(t_warmup)

    def fold(self) -> SimTime:
        return self.model.fold(list(self._latest.values()))

    @property
    def t_current(self) -> SimTime | None:
        return self.model.t_current
