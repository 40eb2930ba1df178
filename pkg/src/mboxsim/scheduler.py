"""Central packet scheduler: slot credits, policies and the host register map.

The scheduler tracks, per processor, which packet slots are free.  An
interface may hand its head packet to a processor only against a free slot;
without one the interface is backpressured and its RX FIFO fills.  Freed
slots come back as control messages from the processors' wrappers.

Two policies are provided: round robin over the eligible processors, and a
flow hash that keeps every packet of a 5-tuple on one processor and
prepends the 32-bit hash to the packet.
"""

from __future__ import annotations

import logging
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from .sim.events import EventLoop, InvariantViolation

log = logging.getLogger(__name__)

MASK32 = 0xFFFF_FFFF
FLOW_HASH_SEED = 0x5F1F_3A2D

ETHERTYPE_IPV4 = 0x0800
ETHERTYPE_IPV6 = 0x86DD
PROTO_TCP = 6
PROTO_UDP = 17

# Host read/write channel, 30-bit word addresses.
REG_ID = 0x000
REG_NUM_PES = 0x001
REG_INGRESS_MASK = 0x002
REG_DISABLE_MASK = 0x003
REG_POLICY = 0x004
REG_RR_POINTER = 0x005
REG_BACKPRESSURE = 0x006
REG_HASH_FALLBACK = 0x007
REG_CREDITS = 0x100
REG_MAX_SLOT = 0x200
REG_DISABLE = 0x300
REG_ENABLE = 0x400
REG_FLUSH = 0x500
REG_STATUS = 0x600
PER_PE_WINDOW = 0x100
SCHED_ID = 0x5C4E_D001
ERROR_VALUE = MASK32
ADDR_MASK = (1 << 30) - 1

STATUS_ENABLED = 0x1
STATUS_REGISTERED = 0x2
STATUS_INGRESS = 0x4
STATUS_DRAINED = 0x8

REGISTER_MAP = (
    (REG_ID, "ID", "r", "constant identifier"),
    (REG_NUM_PES, "NUM_PES", "r", "number of processors"),
    (REG_INGRESS_MASK, "INGRESS_MASK", "rw", "processors eligible for interface traffic"),
    (REG_DISABLE_MASK, "DISABLE_MASK", "r", "processors currently disabled"),
    (REG_POLICY, "POLICY", "rw", "0 = round robin, 1 = flow hash"),
    (REG_RR_POINTER, "RR_POINTER", "r", "last processor granted"),
    (REG_BACKPRESSURE, "BACKPRESSURE_COUNT", "r", "assign attempts that found no slot"),
    (REG_HASH_FALLBACK, "HASH_FALLBACK_COUNT", "r", "unparseable packets sent round robin"),
    (REG_CREDITS, "CREDITS+pe", "r", "free slots of processor pe"),
    (REG_MAX_SLOT, "MAX_SLOT_SIZE+pe", "r", "registered slot size of processor pe"),
    (REG_DISABLE, "DISABLE+pe", "w", "stop assigning new packets to pe"),
    (REG_ENABLE, "ENABLE+pe", "w", "resume assigning to pe"),
    (REG_FLUSH, "FLUSH+pe", "w", "drop pe's credits ahead of a reload"),
    (REG_STATUS, "STATUS+pe", "r", "bit0 enabled, bit1 registered, bit2 ingress, bit3 drained"),
)


def describe_register_map() -> str:
    lines = ["addr   name                 access  meaning"]
    for addr, name, acc, meaning in REGISTER_MAP:
        lines.append(f"{addr:#05x}  {name:<20} {acc:<7} {meaning}")
    return "\n".join(lines)


# ---------------------------------------------------------------- flow hash

def _rotl(x: int, r: int) -> int:
    return ((x << r) | (x >> (32 - r))) & MASK32


def _mix_word(h: int, k: int) -> int:
    k = (k * 0xCC9E2D51) & MASK32
    k = _rotl(k, 15)
    k = (k * 0x1B873593) & MASK32
    h ^= k
    h = _rotl(h, 13)
    return (h * 5 + 0xE6546B64) & MASK32


def fmix32(h: int) -> int:
    h ^= h >> 16
    h = (h * 0x85EBCA6B) & MASK32
    h ^= h >> 13
    h = (h * 0xC2B2AE35) & MASK32
    h ^= h >> 16
    return h


def flow_hash(src_ip: int, dst_ip: int, src_port: int, dst_port: int, proto: int,
              seed: int = FLOW_HASH_SEED) -> int:
    """32-bit flow hash: MurmurHash3 (x86, 32-bit) of the 16-byte little-endian
    key ``src_ip | dst_ip | sport << 16 | dport | proto``."""
    h = seed & MASK32
    for k in (src_ip, dst_ip, ((src_port & 0xFFFF) << 16) | (dst_port & 0xFFFF), proto & 0xFF):
        h = _mix_word(h, k)
    return fmix32(h ^ 16)


def parse_five_tuple(frame: bytes) -> tuple[int, int, int, int, int] | None:
    """(src, dst, sport, dport, proto) of an IPv4 TCP/UDP frame, else None."""
    if len(frame) < 34:
        return None
    if (frame[12] << 8 | frame[13]) != ETHERTYPE_IPV4:
        return None
    vihl = frame[14]
    if vihl >> 4 != 4:
        return None
    ihl = (vihl & 0xF) * 4
    if ihl < 20:
        return None
    proto = frame[23]
    src, dst = struct.unpack_from("!II", frame, 26)
    if proto not in (PROTO_TCP, PROTO_UDP):
        return None
    l4 = 14 + ihl
    if len(frame) < l4 + 4:
        return None
    sport, dport = struct.unpack_from("!HH", frame, l4)
    return src, dst, sport, dport, proto


# ---------------------------------------------------------------- state

@dataclass
class SchedulerStats:
    assigned: int = 0
    backpressure: int = 0
    hash_fallback: int = 0
    loopback_grants: int = 0
    loopback_deferred: int = 0
    stale_notices: int = 0
    ctl_errors: int = 0
    per_pe_assigned: list = field(default_factory=list)


class Scheduler:
    """Slot-credit scheduler for ``num_pes`` processors."""

    def __init__(self, loop: EventLoop, num_pes: int, policy: str = "rr",
                 ingress_pes=None, processors=None, check: bool = True):
        if policy not in ("rr", "hash"):
            raise ValueError(f"unknown policy {policy!r}")
        self.loop = loop
        self.n = num_pes
        self.policy = policy
        self.processors = processors
        self.check = check
        self.free_slots: list[deque] = [deque() for _ in range(num_pes)]
        self.registered = [0] * num_pes
        self.max_size = [0] * num_pes
        self.epoch = [0] * num_pes
        self.ingress = [True] * num_pes if ingress_pes is None else [
            p in set(ingress_pes) for p in range(num_pes)]
        self.disabled = [False] * num_pes
        self.rr_last = num_pes - 1
        self.stats = SchedulerStats(per_pe_assigned=[0] * num_pes)
        self._eligible: list[int] | None = None
        self._hash_cache: dict[bytes, int] = {}
        self._waiting: list[Callable | None] = []
        self._wait_rr = 0
        self._loopback_q: deque = deque()

    # -- credits
    def credits(self, pe: int) -> int:
        return len(self.free_slots[pe])

    def register_slots(self, pe: int, count: int, max_size: int) -> None:
        """A processor announces its slots; re-registering resets its credits."""
        if count < 0 or max_size < 0:
            raise ValueError("slot count and size must be non-negative")
        self.registered[pe] = count
        self.max_size[pe] = max_size
        self.free_slots[pe] = deque(range(count))
        self._credit_changed(pe)

    def flush(self, pe: int) -> None:
        """Forget pe's slots; notices from the old epoch are then ignored."""
        self.free_slots[pe].clear()
        self.registered[pe] = 0
        self.epoch[pe] += 1

    def on_slot_freed(self, pe: int, slot: int, epoch: int | None = None) -> None:
        if epoch is not None and epoch != self.epoch[pe]:
            self.stats.stale_notices += 1
            return
        free = self.free_slots[pe]
        if slot in free or not 0 <= slot < self.registered[pe]:
            raise InvariantViolation(f"pe{pe}: slot {slot} freed twice or never assigned",
                                     self.loop.now)
        free.append(slot)
        self._credit_changed(pe)

    def _take(self, pe: int) -> int:
        slot = self.free_slots[pe].popleft()
        self.stats.assigned += 1
        self.stats.per_pe_assigned[pe] += 1
        if self.processors is not None:
            self.processors[pe].claim(slot)
        if self.check:
            self.check_credits(pe)
        return slot

    def check_credits(self, pe: int) -> None:
        """credits + slots owned by the processor + notices in flight == registered."""
        procs = self.processors
        if procs is None:
            return
        p = procs[pe]
        if p.epoch != self.epoch[pe] or not self.registered[pe]:
            return
        total = len(self.free_slots[pe]) + p.owned + p.notices_in_flight
        if total != self.registered[pe]:
            raise InvariantViolation(
                f"pe{pe}: credit conservation broken: {len(self.free_slots[pe])} free + "
                f"{p.owned} owned + {p.notices_in_flight} notices != {self.registered[pe]}",
                self.loop.now)

    # -- eligibility
    def eligible(self) -> list[int]:
        if self._eligible is None:
            self._eligible = [p for p in range(self.n)
                              if self.ingress[p] and not self.disabled[p]]
        return self._eligible

    def _invalidate(self):
        self._eligible = None

    def disable(self, pe: int) -> None:
        self.disabled[pe] = True
        self._invalidate()

    def enable(self, pe: int) -> None:
        self.disabled[pe] = False
        self._invalidate()
        self._credit_changed(pe)

    def set_ingress(self, pes) -> None:
        pes = set(pes)
        self.ingress = [p in pes for p in range(self.n)]
        self._invalidate()

    # -- policies
    def pick_rr(self, length: int) -> int | None:
        """Next eligible processor after the RR pointer with a slot that fits."""
        n = self.n
        start = self.rr_last + 1
        free = self.free_slots
        ok_in = self.ingress
        dis = self.disabled
        maxs = self.max_size
        for k in range(n):
            p = (start + k) % n
            if free[p] and ok_in[p] and not dis[p] and maxs[p] >= length:
                return p
        return None

    def hash_of(self, frame: bytes) -> int | None:
        key = frame[:64]
        h = self._hash_cache.get(key)
        if h is None:
            tup = parse_five_tuple(frame)
            if tup is None:
                return None
            h = flow_hash(*tup)
            if len(self._hash_cache) > 65536:
                self._hash_cache.clear()
            self._hash_cache[key] = h
        return h

    def pick_hash(self, h: int) -> int | None:
        elig = self.eligible()
        if not elig:
            return None
        return elig[h % len(elig)]

    def assign(self, pkt, length: int, wake: Callable | None = None) -> tuple[int, int] | None:
        """Pick a processor and slot for ``pkt``; None means backpressure.

        On backpressure ``wake`` (if given) is called once a credit returns.
        Under the hash policy the packet's ``meta`` is set to its hash.
        """
        pe = None
        if self.policy == "hash":
            h = pkt.meta if pkt.meta is not None else self.hash_of(pkt.data)
            if h is None:
                self.stats.hash_fallback += 1
                pe = self.pick_rr(length)
            else:
                cand = self.pick_hash(h)
                if (cand is not None and self.free_slots[cand]
                        and self.max_size[cand] >= length + 4):
                    pe = cand
                    pkt.meta = h
        else:
            pe = self.pick_rr(length)
        if pe is None:
            self.stats.backpressure += 1
            if wake is not None:
                self._waiting.append(wake)
            return None
        self.rr_last = pe
        return pe, self._take(pe)

    def fits_anywhere(self, length: int) -> bool:
        return any(self.registered[p] and self.max_size[p] >= length for p in self.eligible())

    # -- loopback slot grants
    def request_loopback_slot(self, dst: int, grant: Callable[[int], None]) -> None:
        """Grant a slot of ``dst`` now or as soon as one frees up (FIFO order)."""
        if not self._loopback_q and self.free_slots[dst] and not self.disabled[dst]:
            self.stats.loopback_grants += 1
            grant(self._take(dst))
            return
        self.stats.loopback_deferred += 1
        self._loopback_q.append((dst, grant))

    def _credit_changed(self, pe: int) -> None:
        q = self._loopback_q
        if q:
            keep = deque()
            while q:
                dst, grant = q.popleft()
                if self.free_slots[dst] and not self.disabled[dst]:
                    self.stats.loopback_grants += 1
                    grant(self._take(dst))
                else:
                    keep.append((dst, grant))
            self._loopback_q = keep
        if self._waiting and self.free_slots[pe]:
            waiting = self._waiting
            self._waiting = []
            k = self._wait_rr % len(waiting)
            self._wait_rr += 1
            for wake in waiting[k:] + waiting[:k]:
                wake()

    # -- host read/write channel
    def host_ctrl(self, op: str, addr: int, value: int = 0) -> int:
        """Read or write a scheduler register; unknown addresses return 0xFFFFFFFF."""
        if addr < 0 or addr > ADDR_MASK:
            return self._ctl_error(op, addr)
        if op == "read":
            return self._read(addr)
        if op == "write":
            return self._write(addr, value & MASK32)
        raise ValueError(f"op must be read or write, got {op!r}")

    def _ctl_error(self, op, addr):
        self.stats.ctl_errors += 1
        log.error("scheduler: %s of unmapped register %#x", op, addr)
        return ERROR_VALUE

    def _per_pe(self, addr: int, base: int) -> int | None:
        if base <= addr < base + PER_PE_WINDOW and addr - base < self.n:
            return addr - base
        return None

    def _mask(self, flags) -> int:
        return sum(1 << p for p, f in enumerate(flags) if f)

    def _read(self, addr: int) -> int:
        simple = {
            REG_ID: lambda: SCHED_ID,
            REG_NUM_PES: lambda: self.n,
            REG_INGRESS_MASK: lambda: self._mask(self.ingress),
            REG_DISABLE_MASK: lambda: self._mask(self.disabled),
            REG_POLICY: lambda: 1 if self.policy == "hash" else 0,
            REG_RR_POINTER: lambda: self.rr_last,
            REG_BACKPRESSURE: lambda: self.stats.backpressure & MASK32,
            REG_HASH_FALLBACK: lambda: self.stats.hash_fallback & MASK32,
        }
        if addr in simple:
            return simple[addr]()
        pe = self._per_pe(addr, REG_CREDITS)
        if pe is not None:
            return self.credits(pe)
        pe = self._per_pe(addr, REG_MAX_SLOT)
        if pe is not None:
            return self.max_size[pe]
        pe = self._per_pe(addr, REG_STATUS)
        if pe is not None:
            return self.status(pe)
        return self._ctl_error("read", addr)

    def status(self, pe: int) -> int:
        s = 0
        if not self.disabled[pe]:
            s |= STATUS_ENABLED
        if self.registered[pe]:
            s |= STATUS_REGISTERED
        if self.ingress[pe]:
            s |= STATUS_INGRESS
        if self.registered[pe] and self.credits(pe) == self.registered[pe]:
            s |= STATUS_DRAINED
        return s

    def _write(self, addr: int, value: int) -> int:
        if addr == REG_INGRESS_MASK:
            self.set_ingress(p for p in range(self.n) if value >> p & 1)
            return 0
        if addr == REG_POLICY:
            if value not in (0, 1):
                return self._ctl_error("write", addr)
            self.policy = "hash" if value else "rr"
            return 0
        pe = self._per_pe(addr, REG_DISABLE)
        if pe is not None:
            self.disable(pe)
            return 0
        pe = self._per_pe(addr, REG_ENABLE)
        if pe is not None:
            self.enable(pe)
            return 0
        pe = self._per_pe(addr, REG_FLUSH)
        if pe is not None:
            self.flush(pe)
            return 0
        return self._ctl_error("write", addr)


def register_address(name: str, pe: int | None = None) -> int:
    """Address of a register by name, e.g. ``register_address("CREDITS", 3)``."""
    table = {
        "ID": REG_ID, "NUM_PES": REG_NUM_PES, "INGRESS_MASK": REG_INGRESS_MASK,
        "DISABLE_MASK": REG_DISABLE_MASK, "POLICY": REG_POLICY,
        "RR_POINTER": REG_RR_POINTER, "BACKPRESSURE_COUNT": REG_BACKPRESSURE,
        "HASH_FALLBACK_COUNT": REG_HASH_FALLBACK,
    }
    per_pe = {"CREDITS": REG_CREDITS, "MAX_SLOT_SIZE": REG_MAX_SLOT, "DISABLE": REG_DISABLE,
              "ENABLE": REG_ENABLE, "FLUSH": REG_FLUSH, "STATUS": REG_STATUS}
    key = name.upper()
    if key in table:
        return table[key]
    if key in per_pe:
        if pe is None:
            raise KeyError(f"register {name} needs a processor index")
        return per_pe[key] + pe
    raise KeyError(f"unknown scheduler register {name!r}\n{describe_register_map()}")
