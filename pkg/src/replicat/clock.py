"""Injectable time source.

Everything in the system reads time through a Clock so that simulations can
drive a deterministic timeline while a service deployment uses wall time.
Times are plain float seconds (epoch-like for wall clocks, starting at 0 for
simulated ones).
"""

import time


class Clock:
    def now(self) -> float:
        raise NotImplementedError


class WallClock(Clock):
    def now(self) -> float:
        return time.time()


class SimClock(Clock):
    """Manually advanced clock for scenario runs and tests."""

    def __init__(self, start: float = 0.0):
        self._now = float(start)

    def now(self) -> float:
        return self._now

    def advance(self, seconds: float) -> float:
        if seconds < 0:
            raise ValueError("clock cannot go backwards")
        self._now += seconds
        return self._now

    def set(self, at: float) -> None:
        if at < self._now:
            raise ValueError("clock cannot go backwards")
        self._now = at
