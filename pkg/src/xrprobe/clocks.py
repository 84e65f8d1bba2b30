"""Per-node virtual clocks: linear offset/drift model plus an NTP-style
periodic correction.

Every node in a session stamps events with its own clock. The simulator keeps
a single true timeline and derives each node's local timestamps through a
``VirtualClock``, so residual clock error propagates into measured latencies
exactly the way it does between real NTP-synced devices.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, replace

# Milliseconds since the Unix epoch. Kept as a plain int: timestamps are
# totally ordered and integer-valued everywhere downstream.
Timestamp = int

DEFAULT_NTP_SIGMA_MS = 0.5
DEFAULT_SYNC_INTERVAL_S = 64.0


class TimeBeforeAnchor(ValueError):
    """Clock evaluated at a true time earlier than its anchor t0."""


@dataclass(frozen=True)
class VirtualClock:
    """local(t) = t + offset_ms + drift_ppm * 1e-6 * (t - t0_ms)."""

    node_id: str
    offset_ms: float = 0.0
    drift_ppm: float = 0.0
    t0_ms: float = 0.0

    def local(self, true_time_ms: float) -> float:
        if true_time_ms < self.t0_ms:
            raise TimeBeforeAnchor(
                f"clock {self.node_id!r}: {true_time_ms} precedes anchor {self.t0_ms}"
            )
        return (
            true_time_ms
            + self.offset_ms
            + self.drift_ppm * 1e-6 * (true_time_ms - self.t0_ms)
        )


def local_now(clock: VirtualClock, true_time_ms: float) -> Timestamp:
    """Local timestamp of the node at a given true time, rounded to whole ms."""
    return round(clock.local(true_time_ms))


def ntp_sync(
    clock: VirtualClock,
    sigma_ms: float,
    rng: random.Random,
    at_ms: float | None = None,
) -> VirtualClock:
    """Model one NTP correction: the residual offset is redrawn from
    N(0, sigma_ms) and the anchor moves to the sync instant, so drift error
    restarts from zero. Drift itself is a hardware property and survives.

    ``at_ms`` is the true time of the sync; when omitted the anchor stays put.
    """
    if sigma_ms < 0:
        raise ValueError("sigma_ms must be non-negative")
    offset = rng.gauss(0.0, sigma_ms) if sigma_ms > 0 else 0.0
    t0 = clock.t0_ms if at_ms is None else float(at_ms)
    return replace(clock, offset_ms=offset, t0_ms=t0)
