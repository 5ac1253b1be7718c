"""Instrumented logical-allocation tracking for benchmark memory accounting.

The benchmark reports tracked logical buffer sizes, not OS-resident
memory: code paths that create major buffers (embeddings, projections,
attention scores, feed-forward intermediates, model weights) report each
allocation and release to the active tracker.  This makes peak figures
reproducible across machines and directly comparable to the analytic
band-storage formulas; short-lived elementwise temporaries are outside
the model.

Usage::

    with track() as tracker:
        model.forward(ids, partition)
    tracker.peak_bytes
    tracker.tag_peak("attn_scores")

A tracker with a byte limit raises MemoryError when an allocation would
exceed it, which the benchmark records as an unmeasurable (OOM) cell.
Trackers are installed per-context (contextvar), so concurrent
measurements in different contexts do not interfere; one measurement at a
time per context.
"""

from __future__ import annotations

import contextlib
from contextvars import ContextVar
from dataclasses import dataclass, field


@dataclass
class AllocationTracker:
    """Running and peak byte counts, total and per tag."""

    limit_bytes: int | None = None
    current_bytes: int = 0
    peak_bytes: int = 0
    _tag_current: dict = field(default_factory=dict)
    _tag_peak: dict = field(default_factory=dict)

    def allocate(self, nbytes: int, tag: str = "buffer") -> None:
        if nbytes < 0:
            raise ValueError("allocation size must be non-negative")
        if self.limit_bytes is not None and self.current_bytes + nbytes > self.limit_bytes:
            raise MemoryError(
                f"tracked allocation of {nbytes} bytes exceeds limit "
                f"{self.limit_bytes} (current {self.current_bytes})"
            )
        self.current_bytes += nbytes
        self.peak_bytes = max(self.peak_bytes, self.current_bytes)
        cur = self._tag_current.get(tag, 0) + nbytes
        self._tag_current[tag] = cur
        self._tag_peak[tag] = max(self._tag_peak.get(tag, 0), cur)

    def release(self, nbytes: int, tag: str = "buffer") -> None:
        self.current_bytes -= nbytes
        self._tag_current[tag] = self._tag_current.get(tag, 0) - nbytes

    def tag_peak(self, tag: str) -> int:
        return self._tag_peak.get(tag, 0)

    def tag_current(self, tag: str) -> int:
        return self._tag_current.get(tag, 0)

    @property
    def tags(self) -> tuple[str, ...]:
        return tuple(sorted(self._tag_peak))


_active: ContextVar[AllocationTracker | None] = ContextVar("sparsecross_tracker", default=None)


def current_tracker() -> AllocationTracker | None:
    return _active.get()


@contextlib.contextmanager
def track(limit_bytes: int | None = None):
    """Install a fresh tracker for the dynamic extent of the block."""
    tracker = AllocationTracker(limit_bytes=limit_bytes)
    token = _active.set(tracker)
    try:
        yield tracker
    finally:
        _active.reset(token)


def record_alloc(nbytes: int, tag: str) -> None:
    tracker = _active.get()
    if tracker is not None:
        tracker.allocate(nbytes, tag)


def record_release(nbytes: int, tag: str) -> None:
    tracker = _active.get()
    if tracker is not None:
        tracker.release(nbytes, tag)


@contextlib.contextmanager
def hold(nbytes: int, tag: str):
    """Record an allocation for the duration of the block."""
    record_alloc(nbytes, tag)
    try:
        yield
    finally:
        record_release(nbytes, tag)
