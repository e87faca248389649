"""Wall-clock phase accounting for the latency-split statistics."""

from __future__ import annotations

import time
from contextlib import contextmanager, nullcontext


class PhaseTimer:
    """Accumulates seconds per named phase; phases must not nest."""

    def __init__(self):
        self.seconds: dict[str, float] = {}

    @contextmanager
    def phase(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.seconds[name] = self.seconds.get(name, 0.0) + time.perf_counter() - t0

    def total(self) -> float:
        return sum(self.seconds.values())


def maybe_phase(timer: PhaseTimer | None, name: str):
    """Phase context when a timer is present, no-op otherwise."""
    return timer.phase(name) if timer is not None else nullcontext()
