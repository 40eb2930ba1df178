"""Two-stage switching fabric: arbiters, per-input FIFOs, links and ports.

Ingress: an interface's output stream (wide, cut-through) lands in a
per-(interface, processor) FIFO inside the cluster switch; each processor's
narrow link round-robins across those FIFOs.  Egress: a processor reads its
packet out over its own narrow link into the transmit FIFO of the target
port; ports admit waiting processors round-robin when FIFO space frees up.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from . import core_model as cm
from .sim.events import EventLoop, InvariantViolation

# Interface ids as seen in a descriptor's ``port`` field.
ETH0, ETH1, HOST, LOOPBACK = 0, 1, 2, 3
IFACE_NAMES = {ETH0: "eth0", ETH1: "eth1", HOST: "host", LOOPBACK: "loopback"}
NUM_IFACES = 4


class RoundRobinArbiter:
    """Grant the first requester strictly after the last grant, cyclically."""

    __slots__ = ("n", "last_grant", "grants")

    def __init__(self, n: int, last_grant: int | None = None):
        if n <= 0:
            raise ValueError("arbiter needs at least one input")
        self.n = n
        self.last_grant = n - 1 if last_grant is None else last_grant
        self.grants = [0] * n

    def arbitrate(self, requests) -> int:
        if not requests:
            raise ValueError("arbitrate() needs at least one request")
        n = self.n
        last = self.last_grant
        best = None
        best_dist = n + 1
        for r in requests:
            d = (r - last - 1) % n
            if d < best_dist:
                best, best_dist = r, d
        self.last_grant = best
        self.grants[best] += 1
        return best

    def peek(self, ready: Callable[[int], bool]) -> int | None:
        """Next input in grant order satisfying ``ready``; no state change."""
        n = self.n
        start = self.last_grant + 1
        for k in range(n):
            i = (start + k) % n
            if ready(i):
                return i
        return None

    def commit(self, i: int) -> None:
        self.last_grant = i
        self.grants[i] += 1


def rr_arbitrate(requests, state: RoundRobinArbiter) -> int:
    return state.arbitrate(requests)


class FifoChannel:
    """Bounded FIFO; producers reserve an entry before the item lands."""

    __slots__ = ("depth", "items", "reserved", "max_occupancy")

    def __init__(self, depth: int):
        self.depth = depth
        self.items: deque = deque()
        self.reserved = 0
        self.max_occupancy = 0

    def __len__(self):
        return len(self.items)

    @property
    def occupancy(self) -> int:
        return len(self.items) + self.reserved

    def has_room(self) -> bool:
        return len(self.items) + self.reserved < self.depth

    def reserve(self):
        if not self.has_room():
            raise InvariantViolation("reserve on a full FIFO")
        self.reserved += 1

    def land(self, item):
        """A previously reserved entry arrives."""
        self.reserved -= 1
        self._push(item)

    def push(self, item):
        if not self.has_room():
            raise InvariantViolation("push on a full FIFO")
        self._push(item)

    def _push(self, item):
        self.items.append(item)
        occ = len(self.items) + self.reserved
        if occ > self.max_occupancy:
            self.max_occupancy = occ

    def pop(self):
        return self.items.popleft()

    def head(self):
        return self.items[0]


class NarrowLink:
    """A processor's inbound 128-bit link, shared by all ingress interfaces.

    ``sink(item, first_byte_ps)`` is called ``post_ps`` after the last byte
    has been written into packet memory.
    """

    def __init__(self, loop: EventLoop, pe: int, rate_gbps, depth: int,
                 sink: Callable, post_ps: int = 0, inputs: int = NUM_IFACES):
        self.loop = loop
        self.pe = pe
        self.rate = rate_gbps
        self.fifos = [FifoChannel(depth) for _ in range(inputs)]
        self.arbiter = RoundRobinArbiter(inputs)
        self.sink = sink
        self.post_ps = post_ps
        self.free_at = 0
        self._wake_pending = False
        self._space_waiters: list[deque] = [deque() for _ in range(inputs)]
        self.busy_ps = 0
        self.transfers = 0
        self.order_log: list | None = None

    def has_room(self, inp: int) -> bool:
        return self.fifos[inp].has_room()

    def reserve(self, inp: int):
        self.fifos[inp].reserve()

    def wait_for_space(self, inp: int, callback: Callable):
        self._space_waiters[inp].append(callback)

    def arrive(self, inp: int, item, nbytes: int):
        """Reserved entry lands in the input FIFO (event at head-flit arrival)."""
        self.fifos[inp].land((item, nbytes))
        now = self.loop.now
        if now >= self.free_at and not self._wake_pending:
            self._start_next()
        elif not self._wake_pending:
            self._wake_pending = True
            self.loop.at(self.free_at, self._wake)

    def _wake(self):
        self._wake_pending = False
        if self.loop.now >= self.free_at:
            self._start_next()

    def _start_next(self):
        fifos = self.fifos
        ready = [i for i, f in enumerate(fifos) if f.items]
        if not ready:
            return
        inp = self.arbiter.arbitrate(ready)
        item, nbytes = fifos[inp].pop()
        now = self.loop.now
        ser = cm.serialization_ps(nbytes, self.rate)
        self.free_at = now + ser
        self.busy_ps += ser
        self.transfers += 1
        if self.order_log is not None:
            self.order_log.append((inp, item))
        self.loop.at(now + ser + self.post_ps, self.sink, item, now)
        waiters = self._space_waiters[inp]
        if waiters:
            waiters.popleft()()
        if any(f.items for f in fifos):
            self._wake_pending = True
            self.loop.at(self.free_at, self._wake)


class TxPort:
    """Store-and-forward transmit port (MAC TX, loopback or host endpoint).

    Space in the transmit FIFO is reserved when a processor starts reading a
    packet out; the reservation is released once the frame has left.  Waiting
    processors are admitted round-robin.
    """

    def __init__(self, loop: EventLoop, name: str, rate_gbps, framing: int,
                 fixed_ps: int, fifo_bytes: int, num_sources: int):
        self.loop = loop
        self.name = name
        self.rate = rate_gbps
        self.framing = framing
        self.fixed_ps = fixed_ps
        self.capacity = fifo_bytes
        self.used = 0
        self.free_at = 0
        self._releases: deque = deque()
        self._waiting: list[deque] = [deque() for _ in range(num_sources)]
        self._n_waiting = 0
        self.arbiter = RoundRobinArbiter(num_sources)
        self._wake_at = None
        self.frames = 0
        self.bytes = 0
        self.busy_ps = 0
        self.max_used = 0

    def _purge(self):
        now = self.loop.now
        rel = self._releases
        while rel and rel[0][0] <= now:
            self.used -= rel.popleft()[1]

    def request(self, src: int, nbytes: int, granted: Callable) -> bool:
        """Ask for FIFO space; ``granted()`` runs now (returns True) or later."""
        self._purge()
        if self._n_waiting == 0 and self.used + nbytes <= self.capacity:
            self._take(nbytes)
            granted()
            return True
        if nbytes > self.capacity:
            raise InvariantViolation(f"{self.name}: {nbytes} B frame exceeds TX FIFO")
        self._waiting[src].append((nbytes, granted))
        self._n_waiting += 1
        self._schedule_wake()
        return False

    def _take(self, nbytes):
        self.used += nbytes
        if self.used > self.max_used:
            self.max_used = self.used

    def _schedule_wake(self):
        if self._releases and self._wake_at is None:
            self._wake_at = self._releases[0][0]
            self.loop.at(self._wake_at, self._wake)

    def _wake(self):
        self._wake_at = None
        self._purge()
        waiting = self._waiting
        while self._n_waiting:
            src = self.arbiter.peek(lambda i: bool(waiting[i]))
            nbytes, granted = waiting[src][0]
            if self.used + nbytes > self.capacity:
                break
            self.arbiter.commit(src)
            waiting[src].popleft()
            self._n_waiting -= 1
            self._take(nbytes)
            granted()
        if self._n_waiting:
            self._schedule_wake()

    def submit(self, nbytes: int, arrival: int, wire_payload: int) -> tuple[int, int]:
        """Frame fully in the FIFO at ``arrival``; returns (tx start, last bit out).

        ``nbytes`` is the reserved FIFO footprint, ``wire_payload`` the bytes
        actually serialized (framing is added here).
        """
        start = arrival if arrival > self.free_at else self.free_at
        ser = cm.serialization_ps(wire_payload + self.framing, self.rate)
        end = start + ser
        self.free_at = end
        self.busy_ps += ser
        self._releases.append((end, nbytes))
        self.frames += 1
        self.bytes += wire_payload
        if self._n_waiting:
            self._schedule_wake()
        return start, end + self.fixed_ps


@dataclass
class ControlChannel:
    """Fixed-latency control network; equal latency keeps per-pair order."""

    loop: EventLoop
    latency_ps: int
    sent: dict = field(default_factory=dict)

    def send(self, kind: str, fn: Callable, *args):
        self.sent[kind] = self.sent.get(kind, 0) + 1
        self.loop.after(self.latency_ps, fn, *args)


@dataclass(frozen=True)
class Hop:
    name: str
    start_ps: int
    end_ps: int


def ingress_hops(cfg, nbytes: int, t0: int = 0) -> list[Hop]:
    """Zero-contention hop schedule from an interface FIFO into a processor."""
    cyc = cfg.cycle_ps
    t = t0
    hops = []
    dec = cfg.scheduler.decision_cycles * cyc
    hops.append(Hop("schedule", t, t + dec))
    t += dec
    wide = cfg.fabric.wide_stage_cycles * cyc
    hops.append(Hop("stage1-wide", t, t + wide))
    t += wide
    narrow_lat = cfg.fabric.narrow_stage_cycles * cyc
    hops.append(Hop("stage2-cluster", t, t + narrow_lat))
    t += narrow_lat
    ser = cm.serialization_ps(nbytes, cfg.narrow_gbps())
    hops.append(Hop("narrow-link", t, t + ser))
    return hops


def egress_hops(cfg, nbytes: int, t0: int = 0, wire_rate=None, framing=None) -> list[Hop]:
    """Zero-contention hop schedule from a processor's memory to the wire."""
    cyc = cfg.cycle_ps
    t = t0 + cfg.processor.tx_setup_cycles * cyc
    ser = cm.serialization_ps(nbytes, cfg.narrow_gbps())
    hops = [Hop("readout", t, t + ser)]
    t += ser
    eg = cfg.fabric.egress_stage_cycles * cyc
    hops.append(Hop("egress-switch", t, t + eg))
    t += eg
    rate = wire_rate or cfg.mac.link_gbps
    fr = cfg.mac.framing_bytes if framing is None else framing
    wser = cm.serialization_ps(nbytes + fr, rate)
    hops.append(Hop("port", t, t + wser))
    return hops
