"""Injectable time sources: the real wall clock and a virtual clock for simulation."""
from __future__ import annotations

from datetime import datetime, timedelta, timezone


def utcnow() -> datetime:
    return datetime.now(timezone.utc)


def as_utc(dt: datetime) -> datetime:
    """Coerce a datetime to an aware UTC instant. Naive datetimes are assumed UTC."""
    if dt.tzinfo is None:
        return dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


def iso(dt: datetime) -> str:
    """RFC 3339 UTC rendering with a trailing Z."""
    return as_utc(dt).isoformat().replace("+00:00", "Z")


def parse_iso(text: str) -> datetime:
    return as_utc(datetime.fromisoformat(text.replace("Z", "+00:00")))


class ClockRegressionError(Exception):
    """Raised when a clock would be moved backwards."""


class SystemClock:
    """Real wall clock."""

    def now(self) -> datetime:
        return utcnow()


class VirtualClock:
    """Manually driven clock. now() never decreases."""

    def __init__(self, start: datetime | None = None):
        self._now = as_utc(start) if start else datetime(2026, 1, 1, tzinfo=timezone.utc)

    def now(self) -> datetime:
        return self._now

    def advance(self, delta: timedelta) -> datetime:
        if delta < timedelta(0):
            raise ClockRegressionError("cannot advance a clock by a negative duration")
        self._now += delta
        return self._now

    def set_to(self, instant: datetime) -> datetime:
        instant = as_utc(instant)
        if instant < self._now:
            raise ClockRegressionError(
                f"cannot move clock from {iso(self._now)} back to {iso(instant)}"
            )
        self._now = instant
        return self._now
