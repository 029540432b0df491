"""Seeded discrete-event engine and samplers underpinning every protocol run.

Randomness is organized as independent keyed streams: the key
(master_seed, site_id, round_index, purpose) is hashed with SHA-256 into a
64-bit seed for a SplitMix64 sequence.  Streams never share state, so
changing one site's draws cannot perturb another's, and results are
bit-identical across platforms.  Sampled times are quantized to 3 fractional
digits and prices to 6 (round-half-even) at the sampling boundary; all later
arithmetic stays in Decimal and is exact.
"""

from __future__ import annotations

import hashlib
import heapq
import math
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Any, Callable, Iterable

from .domain import (
    BidModel,
    ConfigurationError,
    LatencyModel,
    MS_QUANTUM,
    quantize_cpm,
    quantize_ms,
)

_MASK64 = (1 << 64) - 1


class SchedulingError(RuntimeError):
    """An event was scheduled to fire before the current virtual time."""


def _stream_seed(master_seed: int, site_id: str, round_index: int, purpose: str) -> int:
    key = f"{master_seed}|{site_id}|{round_index}|{purpose}".encode("utf-8")
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "big")


class RngStream:
    """One deterministic sample stream for a (site, round, purpose) key."""

    __slots__ = ("master_seed", "site_id", "round_index", "purpose", "_state")

    def __init__(self, master_seed: int, site_id: str, round_index: int, purpose: str):
        self.master_seed = master_seed
        self.site_id = site_id
        self.round_index = round_index
        self.purpose = purpose
        self._state = _stream_seed(master_seed, site_id, round_index, purpose)

    def next_u64(self) -> int:
        self._state = (self._state + 0x9E3779B97F4A7C15) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return (z ^ (z >> 31)) & _MASK64

    def uniform(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def normal(self) -> float:
        """Standard normal via Box-Muller; consumes two raw draws."""
        u1 = ((self.next_u64() >> 11) + 1) * 2.0**-53
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def choice_index(self, n: int) -> int:
        return min(int(self.uniform() * n), n - 1)


def sample_latency(model: LatencyModel, stream: RngStream) -> Decimal:
    """One response-time draw in canonical milliseconds, always > 0."""
    if model.kind == "fixed":
        if model.value_ms is None or model.value_ms <= 0:
            raise ConfigurationError("fixed latency must be strictly positive")
        return model.value_ms
    if model.kind == "lognormal":
        value = quantize_ms(math.exp(model.mu + model.sigma * stream.normal()))
        return value if value > 0 else MS_QUANTUM
    if model.kind == "empirical":
        if not model.samples_ms:
            raise ConfigurationError("empirical latency model has no samples")
        return model.samples_ms[stream.choice_index(len(model.samples_ms))]
    raise ConfigurationError(f"unknown latency model kind {model.kind!r}")


def _bid_value(model: BidModel, stream: RngStream) -> Decimal:
    if model.kind == "fixed":
        if model.value_cpm is None or model.value_cpm < 0:
            raise ConfigurationError("fixed bid must be non-negative")
        return model.value_cpm
    if model.kind == "lognormal":
        return quantize_cpm(math.exp(model.mu + model.sigma * stream.normal()))
    if model.kind == "empirical":
        if not model.samples_cpm:
            raise ConfigurationError("empirical bid model has no samples")
        return model.samples_cpm[stream.choice_index(len(model.samples_cpm))]
    raise ConfigurationError(f"unknown bid model kind {model.kind!r}")


def sample_bid(model: BidModel, stream: RngStream, response_probability) -> Decimal | None:
    """One bid draw; None when the partner declines to respond.

    The first uniform gates the response, further draws produce the value,
    so a given stream yields the same decision sequence everywhere.
    """
    if stream.uniform() >= float(response_probability):
        return None
    return _bid_value(model, stream)


def sample_partner_bids(
    model: BidModel, stream: RngStream, response_probability, n_slots: int
) -> list[Decimal] | None:
    """Response gate plus one bid per slot; None when the partner stays silent."""
    if stream.uniform() >= float(response_probability):
        return None
    return [_bid_value(model, stream) for _ in range(n_slots)]


@dataclass(frozen=True)
class ScheduledEvent:
    """Queue entry; processed in (fire_at_ms, seq) lexicographic order."""

    fire_at_ms: Decimal
    seq: int
    payload: Any


@dataclass
class SimClock:
    now_ms: Decimal = Decimal(0)


Handler = Callable[[Any, Decimal], Iterable[tuple[Decimal, Any]]]


def initial_schedule(entries: Iterable[tuple[Decimal, Any]]) -> list[ScheduledEvent]:
    """Assign insertion sequence numbers in list order."""
    return [ScheduledEvent(quantize_ms(t), i, payload) for i, (t, payload) in enumerate(entries)]


def run_sim(
    initial_events: list[ScheduledEvent], handler: Handler
) -> tuple[SimClock, list[ScheduledEvent]]:
    """Drain the event queue, calling handler(payload, now) for each event.

    The handler may return new (fire_at_ms, payload) pairs; scheduling into
    the past raises SchedulingError.  Events tied on fire time run in
    insertion order.  Returns the final clock and the processed-event log.
    """
    clock = SimClock()
    heap: list[tuple[Decimal, int, Any]] = []
    seq = 0
    for ev in initial_events:
        if ev.fire_at_ms < 0:
            raise SchedulingError(f"initial event at negative time {ev.fire_at_ms}")
        heapq.heappush(heap, (ev.fire_at_ms, ev.seq, ev.payload))
        seq = max(seq, ev.seq + 1)
    log: list[ScheduledEvent] = []
    while heap:
        fire_at, ev_seq, payload = heapq.heappop(heap)
        clock.now_ms = fire_at
        log.append(ScheduledEvent(fire_at, ev_seq, payload))
        for new_time, new_payload in handler(payload, fire_at) or ():
            new_time = quantize_ms(new_time)
            if new_time < clock.now_ms:
                raise SchedulingError(
                    f"handler scheduled event at {new_time} before current time {clock.now_ms}"
                )
            heapq.heappush(heap, (new_time, seq, new_payload))
            seq += 1
    return clock, log
