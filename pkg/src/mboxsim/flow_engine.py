"""Per-processor flow table and software TCP segment reordering.

The scheduler prepends a 32-bit flow hash to each packet.  The low 18 bits
index the flow table and the remaining 14 bits are the tag.  The physical
table is smaller than 2^18 entries (2^15 x 16 B = 0.5 MB by default), so the
18-bit index is XOR-folded onto it; an entry therefore stores the full hash
to tell colliding flows apart.

Out-of-order segments are held (their slots stay owned) until the missing
segment arrives; then the run of now-contiguous segments is released in
sequence order.  The hold buffer is capped; overflowing it triggers the
escalation policy.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import NamedTuple

from .processor import Handler, register_handler
from .sim.config import ConfigError

INDEX_BITS = 18
INDEX_MASK = (1 << INDEX_BITS) - 1
TAG_BITS = 32 - INDEX_BITS
SEQ_MASK = 0xFFFF_FFFF
CARRY_BYTES = 7

NEW_FLOW = "new_flow"
IN_ORDER = "in_order"
OUT_OF_ORDER = "out_of_order"
COLLISION_EVICT = "collision_evict"


def flow_index(h: int) -> tuple[int, int]:
    """Split a 32-bit hash into (18-bit index, 14-bit tag)."""
    h &= 0xFFFF_FFFF
    return h & INDEX_MASK, h >> INDEX_BITS


def fold_index(index: int, entries: int) -> int:
    """XOR-fold an index onto a power-of-two table size."""
    if entries & (entries - 1) or entries <= 0:
        raise ValueError("table size must be a power of two")
    bits = entries.bit_length() - 1
    if bits == 0:
        return 0
    mask = entries - 1
    x = index
    while x >> bits:
        x = (x & mask) ^ (x >> bits)
    return x


def seq_after(a: int, b: int) -> bool:
    """True if sequence number ``a`` is later than ``b`` (mod 2^32)."""
    return a != b and ((a - b) & SEQ_MASK) < 0x8000_0000


class Verdict(NamedTuple):
    kind: str
    expected: int | None = None


class FlowEntry:
    __slots__ = ("hash", "last_seq", "last_len", "last_time", "carry")

    def __init__(self, h: int, seq: int, length: int, now: int, carry: bytes = b""):
        self.hash = h
        self.last_seq = seq
        self.last_len = length
        self.last_time = now
        self.carry = carry

    @property
    def expected(self) -> int:
        return (self.last_seq + self.last_len) & SEQ_MASK

    @property
    def tag(self) -> int:
        return self.hash >> INDEX_BITS


class FlowTable:
    def __init__(self, entries: int = 1 << 15, timeout_ps: int = 10**9, entry_bytes: int = 16):
        fold_index(0, entries)
        self.entries = entries
        self.entry_bytes = entry_bytes
        self.timeout_ps = timeout_ps
        self.table: list[FlowEntry | None] = [None] * entries
        self.stats = {NEW_FLOW: 0, IN_ORDER: 0, OUT_OF_ORDER: 0, COLLISION_EVICT: 0,
                      "timeouts": 0}

    @property
    def state_bytes(self) -> int:
        return self.entries * self.entry_bytes

    def slot_for(self, h: int) -> int:
        index, _ = flow_index(h)
        return fold_index(index, self.entries)

    def lookup(self, h: int) -> FlowEntry | None:
        e = self.table[self.slot_for(h)]
        return e if e is not None and e.hash == h else None

    def _expired(self, e: FlowEntry, now: int) -> bool:
        return now - e.last_time > self.timeout_ps

    def update(self, h: int, seq: int, length: int, now: int, tail: bytes = b"") -> Verdict:
        i = self.slot_for(h)
        e = self.table[i]
        carry = tail[-CARRY_BYTES:]
        if e is None or self._expired(e, now):
            if e is not None:
                self.stats["timeouts"] += 1
            self.table[i] = FlowEntry(h, seq, length, now, carry)
            self.stats[NEW_FLOW] += 1
            return Verdict(NEW_FLOW)
        if e.hash != h:
            self.table[i] = FlowEntry(h, seq, length, now, carry)
            self.stats[COLLISION_EVICT] += 1
            return Verdict(COLLISION_EVICT)
        expected = e.expected
        if seq == expected:
            e.last_seq = seq
            e.last_len = length
            e.last_time = now
            if tail:
                e.carry = (e.carry + tail)[-CARRY_BYTES:]
            self.stats[IN_ORDER] += 1
            return Verdict(IN_ORDER)
        e.last_time = now
        self.stats[OUT_OF_ORDER] += 1
        return Verdict(OUT_OF_ORDER, expected)

    def skip_to(self, h: int, seq: int, length: int, now: int) -> None:
        """Force the flow's position (used when held segments are given up on)."""
        e = self.lookup(h)
        if e is not None:
            e.last_seq, e.last_len, e.last_time = seq, length, now

    def expire(self, now: int) -> int:
        n = 0
        for i, e in enumerate(self.table):
            if e is not None and self._expired(e, now):
                self.table[i] = None
                n += 1
        self.stats["timeouts"] += n
        return n


def flow_update(table: FlowTable, h: int, seq: int, payload_len: int, now: int,
                tail: bytes = b"") -> Verdict:
    return table.update(h, seq, payload_len, now, tail)


def flow_timeout(table: FlowTable, now: int) -> int:
    return table.expire(now)


@dataclass
class Held:
    seq: int
    length: int
    item: object
    since: int


@dataclass
class ReorderBuffer:
    capacity: int = 8
    flows: dict = field(default_factory=dict)   # hash -> {seq: Held}
    count: int = 0
    holds: int = 0
    escalations: int = 0
    max_count: int = 0

    def hold(self, h: int, seq: int, length: int, item, now: int) -> bool:
        """Keep ``item`` back; False if the buffer is already full."""
        if self.count >= self.capacity:
            return False
        self.flows.setdefault(h, {})[seq] = Held(seq, length, item, now)
        self.count += 1
        self.holds += 1
        if self.count > self.max_count:
            self.max_count = self.count
        return True

    def release_ready(self, h: int, table: FlowTable, now: int) -> list:
        """Pop every held segment of flow ``h`` that is now contiguous."""
        pending = self.flows.get(h)
        out = []
        while pending:
            e = table.lookup(h)
            if e is None:
                break
            nxt = pending.pop(e.expected, None)
            if nxt is None:
                break
            table.update(h, nxt.seq, nxt.length, now)
            self.count -= 1
            out.append(nxt.item)
        if pending is not None and not pending:
            del self.flows[h]
        return out

    def oldest_flow(self) -> int | None:
        best, best_t = None, None
        for h, segs in self.flows.items():
            t = min(s.since for s in segs.values())
            if best_t is None or t < best_t:
                best, best_t = h, t
        return best

    def give_up(self, h: int, table: FlowTable, now: int) -> list:
        """Release all of flow ``h`` in sequence order, skipping the gap."""
        segs = self.flows.pop(h, {})
        e = table.lookup(h)
        base = e.expected if e is not None else 0
        ordered = sorted(segs.values(), key=lambda s: (s.seq - base) & SEQ_MASK)
        self.count -= len(ordered)
        if ordered:
            last = ordered[-1]
            table.skip_to(h, last.seq, last.length, now)
        return [s.item for s in ordered]


def parse_tcp(frame: bytes, offset: int = 0) -> tuple[int, int, int] | None:
    """(seq, payload_len, header_len) of an IPv4/TCP frame starting at ``offset``."""
    if len(frame) < offset + 54:
        return None
    if frame[offset + 12] != 0x08 or frame[offset + 13] != 0x00:
        return None
    vihl = frame[offset + 14]
    if vihl >> 4 != 4 or frame[offset + 23] != 6:
        return None
    ihl = (vihl & 0xF) * 4
    total = struct.unpack_from("!H", frame, offset + 16)[0]
    tcp = offset + 14 + ihl
    if len(frame) < tcp + 20:
        return None
    seq = struct.unpack_from("!I", frame, tcp + 4)[0]
    doff = (frame[tcp + 12] >> 4) * 4
    return seq, max(0, total - ihl - doff), 14 + ihl + doff


@register_handler("flow_reorder")
class FlowReorderHandler(Handler):
    """Track each flow's sequence and release segments to the wire in order."""

    def __init__(self, proc, params):
        super().__init__(proc, params)
        fcfg = proc.cfg.flow
        self.cycles = int(params.get("cycles", 16))
        self.table_cycles = int(params.get("table_cycles", 4))
        self.release_cycles = int(params.get("release_cycles", 2))
        self.table = FlowTable(fcfg.table_entries, fcfg.timeout_ps, fcfg.entry_bytes)
        capacity = int(params.get("capacity", fcfg.reorder_capacity))
        if capacity > proc.cfg.slots.count:
            raise ConfigError("reorder capacity exceeds the slot count")
        self.buffer = ReorderBuffer(capacity)
        self.escalation = params.get("escalation", fcfg.escalation)
        self.stats = {"passthrough": 0, "late": 0, "released_in_order": 0,
                      "released_out_of_order": 0, "escalation_drops": 0}

    def _out(self, desc) -> int:
        return desc.port if desc.port in (0, 1) else desc.pkt.origin

    def on_packet(self, ctx, desc):
        ctx.charge(self.cycles)
        hdr = ctx.header(desc)
        pkt = desc.pkt
        if pkt is None or pkt.meta is None or len(hdr) < 4:
            self.stats["passthrough"] += 1
            ctx.send(desc, self._out(desc))
            return
        h = int.from_bytes(hdr[:4], "big")
        tcp = parse_tcp(hdr, 4)
        if tcp is None:
            self.stats["passthrough"] += 1
            ctx.send(desc, self._out(desc))
            return
        seq, plen, _ = tcp
        now = self.proc.loop.now
        ctx.charge(self.table_cycles)
        tail = b""
        v = self.table.update(h, seq, plen, now, tail)
        if v.kind != OUT_OF_ORDER:
            ctx.send(desc, self._out(desc))
            self._release(ctx, h, now)
            return
        if not seq_after(seq, v.expected):
            # Behind the expected sequence: a retransmission or a segment we
            # already gave up waiting for.  Pass it on.
            self.stats["late"] += 1
            ctx.send(desc, self._out(desc))
            return
        if self.buffer.hold(h, seq, plen, desc, now):
            ctx.hold(desc)
            return
        self.buffer.escalations += 1
        if self.escalation == "drop":
            self.stats["escalation_drops"] += 1
            ctx.drop(desc)
            return
        victim = self.buffer.oldest_flow()
        for d in self.buffer.give_up(victim, self.table, now):
            ctx.charge(self.release_cycles)
            self.stats["released_out_of_order"] += 1
            ctx.send(d, self._out(d))
        # Re-evaluate the new segment against the (possibly moved) flow state.
        v = self.table.update(h, seq, plen, now, tail)
        if v.kind != OUT_OF_ORDER or not seq_after(seq, v.expected):
            ctx.send(desc, self._out(desc))
            self._release(ctx, h, now)
        elif self.buffer.hold(h, seq, plen, desc, now):
            ctx.hold(desc)
        else:
            ctx.drop(desc)

    def _release(self, ctx, h: int, now: int) -> None:
        for d in self.buffer.release_ready(h, self.table, now):
            ctx.charge(self.release_cycles)
            self.stats["released_in_order"] += 1
            ctx.send(d, self._out(d))

    def state_image(self) -> bytes:
        live = sum(1 for e in self.table.table if e is not None)
        return live.to_bytes(4, "little")
