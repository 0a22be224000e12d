"""FTP Model 3 traffic: fixed-size files with Poisson arrivals, per-user FIFOs.

Arrival counts are drawn by inverting the Poisson CDF at a uniform variate.
With a shared uniform stream the per-slot counts are then nondecreasing in
the arrival rate, which keeps load sweeps on common random numbers.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy.stats import poisson

BITS_PER_MB = 8e6


@dataclass
class Packet:
    id: int
    user: int
    arrival_slot: int
    size: float
    remaining: float


@dataclass(frozen=True)
class TrafficConfig:
    mean_interarrival: float = 20.0  # ms, per user
    packet_size: float = 0.05 * BITS_PER_MB  # bits

    def __post_init__(self):
        if not self.mean_interarrival > 0:
            raise ValueError("traffic.mean_interarrival must be > 0")
        if not self.packet_size > 0:
            raise ValueError("traffic.packet_size must be > 0")

    @classmethod
    def from_mb(cls, mean_interarrival: float, size_mb: float) -> "TrafficConfig":
        return cls(mean_interarrival, size_mb * BITS_PER_MB)


class ArrivalSampler:
    """Per-slot Poisson counts by CDF inversion (cached table per rate)."""

    def __init__(self, config: TrafficConfig, slot_ms: float = 1.0):
        self.config = config
        self.rate = slot_ms / config.mean_interarrival
        if np.isfinite(self.rate) and self.rate > 0:
            kmax = int(poisson.ppf(1 - 1e-15, self.rate)) + 2
            self.cdf = poisson.cdf(np.arange(kmax), self.rate)
        else:
            self.cdf = np.ones(1)

    def counts(self, uniforms: np.ndarray) -> np.ndarray:
        return np.searchsorted(self.cdf, uniforms, side="left")


def generate_arrivals(
    config: TrafficConfig, rng: np.random.Generator, slot: int, n_users: int,
    slot_ms: float = 1.0, first_id: int = 0,
) -> list:
    counts = ArrivalSampler(config, slot_ms).counts(rng.random(n_users))
    return packets_from_counts(counts, config, slot, first_id)


def packets_from_counts(counts, config: TrafficConfig, slot: int, first_id: int = 0) -> list:
    out = []
    pid = first_id
    for user, c in enumerate(counts):
        for _ in range(int(c)):
            out.append(Packet(pid, user, slot, config.packet_size, config.packet_size))
            pid += 1
    return out


@dataclass
class QueueState:
    n_users: int
    fifos: list = field(default=None)
    completed: list = field(default_factory=list)  # (packet_id, user, arrival_slot, delay_ms)
    arrived_bits: float = 0.0
    drained_bits: float = 0.0

    def __post_init__(self):
        if self.fifos is None:
            self.fifos = [deque() for _ in range(self.n_users)]

    def push(self, packets: Iterable[Packet]) -> None:
        for p in packets:
            self.fifos[p.user].append(p)
            self.arrived_bits += p.size

    def has_traffic(self, user: int) -> bool:
        return bool(self.fifos[user])

    def user_pending(self) -> np.ndarray:
        return np.array([sum(p.remaining for p in q) for q in self.fifos])


# relative slack for deciding that a drain exactly finishes a packet
_EPS = 1e-9


def serve(queue: QueueState, user: int, rate: float, slot_budget: float, now: int, slot_ms: float = 1.0):
    """Drain ``user``'s FIFO at ``rate`` bits/s for ``slot_budget`` ms of slot ``now``.

    Returns ``(bits_drained, completions)`` where each completion is
    ``(packet_id, user, arrival_slot, delay_ms)``.  A packet finishing at
    ``elapsed`` ms into the slot has delay ``(now - arrival) * slot_ms + elapsed``.
    """
    if rate < 0:
        raise ValueError("rate must be >= 0")
    fifo = queue.fifos[user]
    drained = 0.0
    done = []
    if rate == 0 or slot_budget <= 0:
        return drained, done
    elapsed = 0.0
    while fifo and elapsed < slot_budget:
        p = fifo[0]
        need = p.remaining / rate * 1e3  # ms
        left = slot_budget - elapsed
        if need <= left * (1 + _EPS):
            elapsed = min(slot_budget, elapsed + need)
            drained += p.remaining
            p.remaining = 0.0
            fifo.popleft()
            rec = (p.id, p.user, p.arrival_slot, (now - p.arrival_slot) * slot_ms + elapsed)
            done.append(rec)
        else:
            bits = rate * left * 1e-3
            p.remaining -= bits
            drained += bits
            elapsed = slot_budget
    queue.drained_bits += drained
    queue.completed.extend(done)
    return drained, done


def pending_load(queues) -> float:
    if isinstance(queues, QueueState):
        queues = [queues]
    return float(sum(p.remaining for q in queues for fifo in q.fifos for p in fifo))


def max_outstanding_delay(queues, now: float, completions: Iterable = (), slot_ms: float = 1.0) -> float:
    """Worst delay in ms: oldest queued packet age at time ``now`` (slot units)
    against this slot's completion delays; 0 when nothing is outstanding."""
    if isinstance(queues, QueueState):
        queues = [queues]
    worst = 0.0
    for q in queues:
        for fifo in q.fifos:
            if fifo:
                worst = max(worst, (now - fifo[0].arrival_slot) * slot_ms)
    for rec in completions:
        worst = max(worst, rec[-1])
    return float(worst)


def write_delays_csv(path, completed: Iterable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["packet_id", "user", "arrival_slot", "delay_ms"])
        for row in completed:
            w.writerow(row)
