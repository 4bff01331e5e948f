"""Debug counters for structural checks (pack counts, kernel phases, MACs).

Counting is off by default; ``recording()`` turns it on for the duration of a
``with`` block and yields the live counter object.
"""

from __future__ import annotations

import threading
from collections import Counter
from contextlib import contextmanager


class Counters:
    def __init__(self) -> None:
        self.enabled = False
        self._lock = threading.Lock()
        self.counts: Counter[str] = Counter()
        self.phase_log: list[str] | None = None
        self.events: list[tuple[str, object]] = []

    def add(self, key: str, n: int = 1) -> None:
        if not self.enabled:
            return
        with self._lock:
            self.counts[key] += n

    def log(self, key: str, value: object) -> None:
        if not self.enabled:
            return
        with self._lock:
            self.events.append((key, value))

    def phase(self, name: str) -> None:
        if self.phase_log is not None:
            with self._lock:
                self.phase_log.append(name)

    def __getitem__(self, key: str) -> int:
        return self.counts[key]


COUNTERS = Counters()


@contextmanager
def recording(phases: bool = False):
    COUNTERS.counts.clear()
    COUNTERS.events.clear()
    COUNTERS.enabled = True
    COUNTERS.phase_log = [] if phases else None
    try:
        yield COUNTERS
    finally:
        COUNTERS.enabled = False
        COUNTERS.phase_log = None
