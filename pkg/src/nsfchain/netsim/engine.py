"""Deterministic event loop on an integer-nanosecond clock."""

from __future__ import annotations

import heapq
from typing import Any, Callable, Optional

NS_PER_S = 1_000_000_000
NS_PER_MS = 1_000_000
NS_PER_US = 1_000


def seconds_to_ns(s: float) -> int:
    return int(round(s * NS_PER_S))


class SimulationError(RuntimeError):
    """An event handler failed; carries the event time and label."""

    def __init__(self, time_ns: int, label: str, cause: BaseException):
        super().__init__(f"event {label!r} at t={time_ns / NS_PER_S:.9f}s failed: {cause!r}")
        self.time_ns = time_ns
        self.label = label
        self.cause = cause


class Simulator:
    """Events ordered by (time, insertion sequence); the clock never goes back."""

    def __init__(self) -> None:
        self.now = 0
        self._queue: list[tuple[int, int, str, Callable[..., Any], tuple]] = []
        self._seq = 0
        self.processed = 0

    def schedule(self, at: int, fn: Callable[..., Any], *args: Any, label: str = "") -> None:
        if at < self.now:
            raise ValueError(f"cannot schedule in the past ({at} < {self.now})")
        heapq.heappush(self._queue, (at, self._seq, label or fn.__name__, fn, args))
        self._seq += 1

    def after(self, delay: int, fn: Callable[..., Any], *args: Any, label: str = "") -> None:
        self.schedule(self.now + delay, fn, *args, label=label)

    def __len__(self) -> int:
        return len(self._queue)

    def peek_time(self) -> Optional[int]:
        return self._queue[0][0] if self._queue else None

    def step(self) -> None:
        at, _, label, fn, args = heapq.heappop(self._queue)
        self.now = at
        try:
            fn(*args)
        except SimulationError:
            raise
        except Exception as exc:
            raise SimulationError(at, label, exc) from exc
        self.processed += 1

    def run_until(self, t: int) -> None:
        """Process every event with time <= t, then set the clock to t."""
        while self._queue and self._queue[0][0] <= t:
            self.step()
        if t > self.now:
            self.now = t

    def run(self, stop: Callable[[], bool], limit: Optional[int] = None) -> None:
        """Process events until ``stop()`` is true, the queue drains or ``limit`` (ns) passes."""
        while self._queue and not stop():
            if limit is not None and self._queue[0][0] > limit:
                self.now = max(self.now, limit)
                return
            self.step()
