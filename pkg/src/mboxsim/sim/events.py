"""Single-threaded discrete-event loop over integer picosecond time."""

from __future__ import annotations

import heapq
import logging
from typing import Callable

log = logging.getLogger(__name__)


class InvariantViolation(RuntimeError):
    """A model invariant was broken; the run cannot be trusted past this point."""

    def __init__(self, message: str, now: int | None = None, context: list[str] | None = None):
        self.now = now
        self.context = context or []
        text = message if now is None else f"t={now}ps: {message}"
        if self.context:
            text += "\nrecent events:\n  " + "\n  ".join(self.context)
        super().__init__(text)


class EventLoop:
    """Priority queue keyed by (time, insertion sequence).

    Equal-time events run in the order they were scheduled, so every run of
    the same configuration produces the same total order.
    """

    def __init__(self, trace: int = 0):
        self.now = 0
        self._heap: list = []
        self._seq = 0
        self.processed = 0
        self._trace_len = trace
        self._trace: list[str] = []
        self.log_file = None

    def at(self, t: int, fn: Callable, *args) -> None:
        if t < self.now:
            raise InvariantViolation(f"event scheduled in the past ({t} < {self.now})", self.now)
        self._seq += 1
        heapq.heappush(self._heap, (t, self._seq, fn, args))

    def after(self, dt: int, fn: Callable, *args) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (self.now + dt, self._seq, fn, args))

    def pending(self) -> int:
        return len(self._heap)

    def peek_time(self) -> int | None:
        return self._heap[0][0] if self._heap else None

    def run(self, until: int | None = None) -> int:
        heap = self._heap
        pop = heapq.heappop
        tracing = self._trace_len or self.log_file is not None
        try:
            while heap:
                if until is not None and heap[0][0] > until:
                    self.now = until
                    break
                t, _, fn, args = pop(heap)
                self.now = t
                self.processed += 1
                if tracing:
                    self._record(t, fn, args)
                fn(*args)
            else:
                if until is not None and until > self.now:
                    self.now = until
        except InvariantViolation as exc:
            if not exc.context and self._trace:
                raise InvariantViolation(str(exc), None, list(self._trace)) from exc
            raise
        return self.now

    def _record(self, t, fn, args):
        name = getattr(fn, "__qualname__", repr(fn))
        line = f"{t} {name} {' '.join(_short(a) for a in args)}"
        if self._trace_len:
            self._trace.append(line)
            if len(self._trace) > self._trace_len:
                del self._trace[0]
        if self.log_file is not None:
            self.log_file.write(line + "\n")

    def recent(self) -> list[str]:
        return list(self._trace)


def _short(obj) -> str:
    text = repr(obj)
    return text if len(text) <= 60 else text[:57] + "..."
