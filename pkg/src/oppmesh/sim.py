"""Deterministic discrete-event simulator: virtual clock, event queue,
link loss/latency models, and per-node random streams.

Time is kept in integer microseconds. Events run in (time, seq) order;
an executing event may only schedule at or after the current time.
"""

from __future__ import annotations

import hashlib
import heapq
import random
from dataclasses import dataclass, field
from typing import Callable

US_PER_MS = 1_000
US_PER_S = 1_000_000


def ms(value: float) -> int:
    """Milliseconds to integer microseconds."""
    return round(value * US_PER_MS)


def seconds(value: float) -> int:
    return round(value * US_PER_S)


def derive_rng(seed: int, label: str) -> random.Random:
    """Stream-split RNG: one independent generator per (seed, label).

    Adding a node (new label) never perturbs the draws of existing ones.
    """
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


@dataclass(order=True)
class SimEvent:
    at: int
    seq: int
    action: Callable[[], None] = field(compare=False)
    cancelled: bool = field(default=False, compare=False)

    def cancel(self) -> None:
        self.cancelled = True


@dataclass
class SimStats:
    now_us: int
    executed: int
    pending: int


class Simulator:
    def __init__(self) -> None:
        self.now = 0
        self._seq = 0
        self._queue: list[SimEvent] = []
        self._executed = 0

    def schedule(self, event: SimEvent) -> SimEvent:
        if event.at < self.now:
            raise ValueError(f"cannot schedule at {event.at} before now {self.now}")
        heapq.heappush(self._queue, event)
        return event

    def schedule_at(self, at_us: int, action: Callable[[], None]) -> SimEvent:
        self._seq += 1
        return self.schedule(SimEvent(at_us, self._seq, action))

    def call_later(self, delay_us: int, action: Callable[[], None]) -> SimEvent:
        return self.schedule_at(self.now + max(0, delay_us), action)

    def run_until(self, t_end_us: int) -> SimStats:
        """Execute every event with timestamp <= t_end_us, then set the clock."""
        while self._queue and self._queue[0].at <= t_end_us:
            event = heapq.heappop(self._queue)
            if event.cancelled:
                continue
            self.now = event.at
            self._executed += 1
            event.action()
        self.now = max(self.now, t_end_us)
        return SimStats(self.now, self._executed, len(self._queue))

    def run(self) -> SimStats:
        """Drain the queue completely (tests and bounded scenarios only)."""
        while self._queue:
            event = heapq.heappop(self._queue)
            if event.cancelled:
                continue
            self.now = event.at
            self._executed += 1
            event.action()
        return SimStats(self.now, self._executed, 0)


@dataclass
class LinkModel:
    """Per-link radio model.

    The mapping from a physical environment to (loss_p, latency) is a
    scenario calibration input, not a propagation formula; shipped
    scenario files label their values as fits.
    """

    base_latency_ms: float = 0.0
    jitter_ms: float = 0.0
    loss_p: float = 0.0
    max_range_m: float = 100.0
    distance_m: float = 0.0

    @property
    def in_range(self) -> bool:
        return self.distance_m <= self.max_range_m

    def sample_latency_us(self, rng: random.Random) -> int:
        jitter = rng.uniform(-self.jitter_ms, self.jitter_ms) if self.jitter_ms else 0.0
        return max(0, ms(self.base_latency_ms + jitter))


def link_transmit(frame: bytes, link: LinkModel, rng: random.Random) -> int | None:
    """One transmission attempt: latency in microseconds, or None if lost.

    Out-of-range links lose deterministically and consume no draws.
    """
    if not link.in_range:
        return None
    if link.loss_p > 0.0 and rng.random() < link.loss_p:
        return None
    return link.sample_latency_us(rng)
