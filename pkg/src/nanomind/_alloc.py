"""Allocation-counter hook.

Kernels report every temporary buffer they create through :func:`note`.
Tests wrap a call in :func:`track_allocations` and inspect the per-tag counts
and the largest single temporary, which is how "no dequantized copy of the
weights" and "no T x T intermediate" are asserted.
"""

from __future__ import annotations

import threading
from collections import Counter
from contextlib import contextmanager

_lock = threading.Lock()
_active: list["AllocationLog"] = []


class AllocationLog:
    def __init__(self):
        self.counts: Counter[str] = Counter()
        self.bytes: Counter[str] = Counter()
        self.peak: dict[str, int] = {}

    def _record(self, tag: str, nbytes: int) -> None:
        self.counts[tag] += 1
        self.bytes[tag] += nbytes
        if nbytes > self.peak.get(tag, 0):
            self.peak[tag] = nbytes

    @property
    def largest(self) -> int:
        return max(self.peak.values(), default=0)

    def __repr__(self):
        return f"AllocationLog(counts={dict(self.counts)}, peak={self.peak})"


def note(tag: str, nbytes: int) -> None:
    if not _active:
        return
    with _lock:
        for log in _active:
            log._record(tag, int(nbytes))


@contextmanager
def track_allocations():
    log = AllocationLog()
    with _lock:
        _active.append(log)
    try:
        yield log
    finally:
        with _lock:
            _active.remove(log)
