"""Injectable time source so scheduler and pipeline logic run under both
wall-clock deployments and compressed-clock simulations."""

from __future__ import annotations

import threading
import time
from datetime import datetime, timezone


class Clock:
    """Wall-clock time."""

    def now(self) -> float:
        return time.time()

    def now_utc(self) -> datetime:
        return datetime.fromtimestamp(self.now(), tz=timezone.utc)

    def sleep(self, seconds: float) -> None:
        time.sleep(seconds)


class SimulatedClock(Clock):
    """Manually advanced clock for discrete-event simulations.

    sleep() advances time instead of blocking, so single-threaded
    simulations run as fast as the host allows.
    """

    def __init__(self, start: float = 0.0):
        self._now = start
        self._lock = threading.Lock()

    def now(self) -> float:
        with self._lock:
            return self._now

    def sleep(self, seconds: float) -> None:
        self.advance(seconds)

    def advance(self, seconds: float) -> float:
        if seconds < 0:
            raise ValueError("cannot advance backwards")
        with self._lock:
            self._now += seconds
            return self._now

    def set(self, timestamp: float) -> None:
        with self._lock:
            if timestamp < self._now:
                raise ValueError("cannot move backwards")
            self._now = timestamp


def utc_iso(ts: float) -> str:
    """Epoch seconds -> fixed-width ISO 8601 UTC (sorts lexicographically)."""
    return datetime.fromtimestamp(ts, tz=timezone.utc).isoformat(timespec="microseconds")


def parse_iso(text: str) -> datetime:
    return datetime.fromisoformat(text)
