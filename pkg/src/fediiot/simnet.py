"""Simulated uplink between clients and the aggregator.

Each upload independently draws a drop decision and a latency from its own
``(seed, client_id, round)`` substream. Nothing here touches a real clock.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol, Sequence, TypeVar

from .rng import substream


class _HasClientId(Protocol):
    client_id: int


U = TypeVar("U", bound=_HasClientId)


@dataclass(frozen=True)
class NetConfig:
    latency_base_ms: float = 0.0
    jitter_ms: float = 0.0
    drop_prob: float = 0.0
    deadline_ms: float | None = None  # None means no straggler cutoff
    seed: int = 0

    def __post_init__(self):
        if self.latency_base_ms < 0 or self.jitter_ms < 0:
            raise ValueError("latency and jitter must be >= 0")
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ValueError("drop_prob must lie in [0, 1]")
        if self.deadline_ms is not None and not self.deadline_ms > self.latency_base_ms:
            raise ValueError("round deadline must exceed the base latency")


@dataclass(frozen=True)
class Delivery:
    client_id: int
    sent_ms: float
    arrival_ms: float | None  # None when the upload was dropped

    @property
    def dropped(self) -> bool:
        return self.arrival_ms is None


def deliver(updates: Sequence[U], net: NetConfig, round_index: int) -> tuple[list[U], list[Delivery]]:
    """Returns the surviving updates (sorted by client id) and one log row per upload."""
    delivered, log = [], []
    for upd in sorted(updates, key=lambda u: u.client_id):
        rng = substream(net.seed, "net", upd.client_id, round_index)
        # both draws always happen so changing drop_prob never shifts latencies
        u_drop, u_lat = rng.random(2)
        arrival = net.latency_base_ms + u_lat * net.jitter_ms
        lost = u_drop < net.drop_prob or (net.deadline_ms is not None and arrival > net.deadline_ms)
        log.append(Delivery(upd.client_id, 0.0, None if lost else arrival))
        if not lost:
            delivered.append(upd)
    return delivered, log


def round_wall_time(log: Sequence[Delivery]) -> float:
    arrivals = [d.arrival_ms for d in log if d.arrival_ms is not None]
    return max(arrivals) if arrivals else 0.0


def drop_rate(log: Sequence[Delivery]) -> float:
    if not log:
        return math.nan
    return sum(d.dropped for d in log) / len(log)
