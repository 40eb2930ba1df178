"""Inter-processor messaging: broadcast shared region and loopback transfers.

Broadcast writes go into a per-processor FIFO (16 entries plus 2 boundary
registers).  Each cluster arbiter moves one message per cycle from its
processors' FIFOs (round robin) into a cluster FIFO; a global arbiter takes
one message per cycle from the cluster FIFOs (round robin) and distributes
it to every other processor, which all see the write at the same instant.
With every processor writing flat out, each processor therefore drains one
message every ``clusters x processors-per-cluster`` cycles (16 by default).

The network is stepped cycle by cycle, but only while it holds messages.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from .fabric import RoundRobinArbiter
from .sim.events import EventLoop, InvariantViolation

log = logging.getLogger(__name__)


@dataclass(slots=True)
class BroadcastMessage:
    src_pe: int
    addr: int
    data: int
    attempt_time: int      # core tried to write
    inject_time: int       # FIFO entry reserved (after any blocking)
    ready_time: int = 0    # visible to the arbiter at the head of a FIFO
    exit_pe_time: int = 0  # left the processor FIFO
    deliver_time: int = 0
    seq: int = 0


@dataclass
class InterruptRange:
    lo: int
    hi: int  # exclusive
    pending: deque = field(default_factory=deque)
    max_pending: int = 0

    def covers(self, addr: int) -> bool:
        return self.lo <= addr < self.hi


@dataclass
class BroadcastStats:
    sent: int = 0
    blocked_writes: int = 0
    blocked_ps: int = 0
    delivered: list = field(default_factory=list)   # per destination
    latencies: list = field(default_factory=list)   # attempt -> delivery, ps
    fifo_waits: list = field(default_factory=list)  # processor FIFO residence, ps
    from_inject: list = field(default_factory=list)  # inject -> delivery, ps
    max_pe_occupancy: int = 0


class BroadcastNetwork:
    def __init__(self, loop: EventLoop, cfg, num_pes: int | None = None):
        mcfg = cfg.messaging
        self.loop = loop
        self.n = cfg.num_pes if num_pes is None else num_pes
        self.ppc = cfg.pes_per_cluster
        self.clusters = self.n // self.ppc
        self.cyc = cfg.cycle_ps
        self.pe_depth = mcfg.pe_fifo_depth + mcfg.pe_boundary_regs
        self.cluster_depth = mcfg.cluster_fifo_depth
        self.write_ps = mcfg.write_cycles * self.cyc
        self.dist_ps = mcfg.dist_cycles * self.cyc
        self.region_bytes = mcfg.region_bytes
        self.pe_fifos = [deque() for _ in range(self.n)]
        self.cluster_fifos = [deque() for _ in range(self.clusters)]
        self.cluster_arb = [RoundRobinArbiter(self.ppc) for _ in range(self.clusters)]
        self.global_arb = RoundRobinArbiter(self.clusters)
        self.regions = [bytearray(self.region_bytes) for _ in range(self.n)]
        self.irq = []
        for pe in range(self.n):
            lo, hi = mcfg.irq_ranges.get(pe, mcfg.irq_ranges.get(str(pe), (0, self.region_bytes)))
            self.irq.append(InterruptRange(int(lo), int(hi)))
        self._waiters = [deque() for _ in range(self.n)]
        self._tick_at: int | None = None
        self._seq = 0
        self.stats = BroadcastStats(delivered=[0] * self.n)
        self.delivery_log: list | None = None
        self.keep_messages = False
        self.messages: list[BroadcastMessage] = []

    # -- producer side
    def write(self, src: int, addr: int, data: int, done: Callable) -> None:
        """Core-side broadcast store: ``done()`` runs when the core may continue."""
        self._check_addr(addr)
        now = self.loop.now
        if len(self.pe_fifos[src]) < self.pe_depth and not self._waiters[src]:
            self._inject(src, addr, data, now)
            self.loop.after(self.write_ps, done)
        else:
            self.stats.blocked_writes += 1
            self._waiters[src].append((addr, data, now, done))

    def try_write(self, src: int, addr: int, data: int) -> bool:
        """Non-blocking variant: False if the processor FIFO is full."""
        self._check_addr(addr)
        if len(self.pe_fifos[src]) >= self.pe_depth or self._waiters[src]:
            return False
        self._inject(src, addr, data, self.loop.now)
        return True

    def _check_addr(self, addr: int) -> None:
        if not 0 <= addr <= self.region_bytes - 4 or addr % 4:
            raise ValueError(f"broadcast address {addr:#x} outside the {self.region_bytes} B "
                             "region or not word aligned")

    def _inject(self, src: int, addr: int, data: int, attempt: int) -> None:
        now = self.loop.now
        self._seq += 1
        msg = BroadcastMessage(src, addr, data & 0xFFFF_FFFF, attempt, now,
                               ready_time=now + self.write_ps, seq=self._seq)
        self.regions[src][addr:addr + 4] = msg.data.to_bytes(4, "little")
        fifo = self.pe_fifos[src]
        fifo.append(msg)
        if len(fifo) > self.stats.max_pe_occupancy:
            self.stats.max_pe_occupancy = len(fifo)
        if len(fifo) > self.pe_depth:
            raise InvariantViolation(f"pe{src}: broadcast FIFO over depth", now)
        self.stats.sent += 1
        self._schedule_tick(msg.ready_time)

    def _schedule_tick(self, t: int) -> None:
        cyc = self.cyc
        t = -(-t // cyc) * cyc
        if self._tick_at is None or t < self._tick_at:
            self._tick_at = t
            self.loop.at(t, self._tick, t)

    # -- network
    def _tick(self, t: int) -> None:
        if self._tick_at != t:
            return  # superseded by an earlier tick
        self._tick_at = None
        now = t
        # Global stage: one message per cycle from the cluster FIFOs.
        ready = [c for c, f in enumerate(self.cluster_fifos) if f and f[0].ready_time <= now]
        if ready:
            c = self.global_arb.arbitrate(ready)
            msg = self.cluster_fifos[c].popleft()
            msg.deliver_time = now + self.dist_ps
            self.loop.at(msg.deliver_time, self._deliver, msg)
        # Cluster stage: one message per cycle per cluster, if there is room.
        ppc = self.ppc
        for c in range(self.clusters):
            cf = self.cluster_fifos[c]
            if len(cf) >= self.cluster_depth:
                continue
            base = c * ppc
            cand = [i for i in range(ppc)
                    if self.pe_fifos[base + i] and self.pe_fifos[base + i][0].ready_time <= now]
            if not cand:
                continue
            i = self.cluster_arb[c].arbitrate(cand)
            pe = base + i
            msg = self.pe_fifos[pe].popleft()
            msg.exit_pe_time = now
            msg.ready_time = now + self.cyc
            cf.append(msg)
            self._room(pe)
        self._reschedule(now)

    def _room(self, pe: int) -> None:
        waiters = self._waiters[pe]
        if waiters:
            addr, data, attempt, done = waiters.popleft()
            self.stats.blocked_ps += self.loop.now - attempt
            self._inject(pe, addr, data, attempt)
            self.loop.after(self.write_ps, done)

    def _reschedule(self, now: int) -> None:
        nxt = None
        for f in self.cluster_fifos:
            if f:
                r = max(f[0].ready_time, now + self.cyc)
                nxt = r if nxt is None else min(nxt, r)
        for f in self.pe_fifos:
            if f:
                r = max(f[0].ready_time, now + self.cyc)
                nxt = r if nxt is None else min(nxt, r)
        if nxt is not None:
            self._schedule_tick(nxt)

    def _deliver(self, msg: BroadcastMessage) -> None:
        word = msg.data.to_bytes(4, "little")
        a = msg.addr
        st = self.stats
        for pe in range(self.n):
            if pe == msg.src_pe:
                continue
            self.regions[pe][a:a + 4] = word
            st.delivered[pe] += 1
            rng = self.irq[pe]
            if rng.covers(a):
                rng.pending.append(a)
                if len(rng.pending) > rng.max_pending:
                    rng.max_pending = len(rng.pending)
        st.latencies.append(msg.deliver_time - msg.attempt_time)
        st.from_inject.append(msg.deliver_time - msg.inject_time)
        st.fifo_waits.append(msg.exit_pe_time - msg.inject_time)
        if self.delivery_log is not None:
            self.delivery_log.append((msg.seq, msg.src_pe, msg.addr, self.loop.now))
        if self.keep_messages:
            self.messages.append(msg)

    # -- consumer side
    def poll(self, pe: int) -> tuple[int, int] | None:
        """Oldest pending address in pe's interrupt range and its current word."""
        pending = self.irq[pe].pending
        if not pending:
            return None
        a = pending.popleft()
        return a, int.from_bytes(self.regions[pe][a:a + 4], "little")

    def idle(self) -> bool:
        return (not any(self.pe_fifos) and not any(self.cluster_fifos)
                and not any(self._waiters))

    def check_lossless(self) -> None:
        """Each destination got every message not sent by itself."""
        if not self.idle():
            return
        sent_by = [0] * self.n
        # Messages sent by pe are not delivered back to it.
        for msg in self.messages:
            sent_by[msg.src_pe] += 1
        if self.keep_messages:
            for pe in range(self.n):
                expect = self.stats.sent - sent_by[pe]
                if self.stats.delivered[pe] != expect:
                    raise InvariantViolation(
                        f"pe{pe}: received {self.stats.delivered[pe]} broadcasts, expected {expect}")


def bcast_poll(net: BroadcastNetwork, pe: int):
    return net.poll(pe)


def send_to_pe(system, src_pe: int, dst_pe: int, desc, done: Callable | None = None) -> None:
    """Move a packet the source core owns to another core via the loopback port.

    A slot of the destination is requested from the scheduler first; the
    packet enters the loopback port only once that grant is back.
    """
    if src_pe == dst_pe:
        raise ValueError("loopback to the sending processor")
    proc = system.processors[src_pe]
    proc._request_loopback(desc, dst_pe)
    if done is not None:
        done()
