"""Single-clock event loop with sampled latency and drops."""

from __future__ import annotations

import hashlib
import heapq
import random
from dataclasses import dataclass, field
from typing import Any

from .scenario import LatencyModel

HARNESS = 0  # sender id for timers; real nodes are numbered from 1


def subsystem_rng(seed: int, label: str) -> random.Random:
    """Independent generator per subsystem, so adding one never perturbs another."""
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


@dataclass(order=True)
class Event:
    tick: int
    sender: int
    seq: int
    kind: str = field(compare=False)  # "msg" or "timer"
    payload: Any = field(compare=False)


class EventLoop:
    """Events are totally ordered by (tick, sender, sequence number)."""

    def __init__(self, latency: LatencyModel, rng: random.Random, now: int = 0):
        self.latency = latency
        self.rng = rng
        self.now = now
        self._heap: list[Event] = []
        self._seq = 0
        self.dropped = 0

    def _push(self, tick: int, sender: int, kind: str, payload) -> None:
        self._seq += 1
        heapq.heappush(self._heap, Event(tick, sender, self._seq, kind, payload))

    def send(self, sender: int, payload, extra_delay: int = 0) -> bool:
        """Schedule a delivery; False when the network drops it."""
        lat = self.latency
        delay = self.rng.randint(lat.min, lat.max)
        if lat.drop and self.rng.random() < lat.drop:
            self.dropped += 1
            return False
        self._push(self.now + delay + extra_delay, sender, "msg", payload)
        return True

    def timer(self, at: int, payload) -> None:
        self._push(at, HARNESS, "timer", payload)

    def messages_pending(self) -> bool:
        return any(e.kind == "msg" for e in self._heap)

    def pop(self) -> Event | None:
        if not self._heap:
            return None
        event = heapq.heappop(self._heap)
        self.now = max(self.now, event.tick)
        return event

    def peek(self) -> Event | None:
        return self._heap[0] if self._heap else None

    def discard(self) -> Event | None:
        """Remove the next event without advancing the clock."""
        return heapq.heappop(self._heap) if self._heap else None
