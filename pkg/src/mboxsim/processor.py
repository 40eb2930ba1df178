"""Packet processor: wrapper, hybrid memory and a cycle-budgeted core.

A processor owns a fixed set of packet slots.  Each slot walks a strict
state machine::

    free -> assigned -> loaded -> core -> [held ->] transmitting -> free

``assigned`` starts when the scheduler hands the slot to an incoming packet
(the packet is then in the fabric), ``loaded`` once the DMA has written the
whole packet (store-and-forward), ``core`` while the handler owns it.  An
oversized packet goes ``assigned -> free`` without ever being loaded.

Cores are not instruction-level models: a handler is a Python callback that
charges cycles to a context object and queues actions (send, drop,
loopback, hold, broadcast write).  The actions take effect once the charged
cycles have elapsed.
"""

from __future__ import annotations

import logging
from collections import deque
from typing import Callable

from . import core_model as cm
from .fabric import ETH0, ETH1, HOST, LOOPBACK
from .sim.config import ConfigError, HandlerSpec, SimConfig
from .sim.events import EventLoop, InvariantViolation

log = logging.getLogger(__name__)

FREE, ASSIGNED, LOADED, CORE, HELD, TRANSMITTING = range(6)
SLOT_STATE_NAMES = ("free", "assigned", "loaded", "core", "held", "transmitting")
_NEXT = (
    (ASSIGNED,),            # free
    (LOADED, FREE),         # assigned (free = oversize drop)
    (CORE,),                # loaded
    (HELD, TRANSMITTING),   # core
    (TRANSMITTING,),        # held
    (FREE,),                # transmitting
)

# Interrupt mask bits.  Evict asks the core to quiesce for reconfiguration,
# Poke is a plain host interrupt.
IRQ_EVICT = 0x10
IRQ_POKE = 0x20

# Accelerator register window as seen by the core.
IO_EXT_BASE = 0x0400_0000
IO_EXT_WINDOW = 0x100

# Values the wrapper puts in the core->host debug register on faults.
DEBUG_FAULT_MMIO = 0xFA17 << 48
DEBUG_HANG = 0xDEAD << 48

META_BYTES = 4

# Action kinds queued by handlers.
A_SEND, A_LOOPBACK, A_HOLD, A_BCAST = range(4)


class MmioFault(Exception):
    def __init__(self, addr: int):
        super().__init__(f"unmapped MMIO address {addr:#x}")
        self.addr = addr


class HandlerHang(Exception):
    pass


class PortError(RuntimeError):
    """A memory port was used in a way the hardware does not allow."""


class Packet:
    """A frame as it moves through the system (payload excludes the FCS)."""

    __slots__ = ("pid", "data", "size", "origin", "t_sent", "meta", "info", "lb_dst")

    def __init__(self, pid: int, data: bytes, origin: int = ETH0, t_sent: int = 0,
                 meta: int | None = None, info=None, check: bool = True):
        size = len(data)
        if check and not cm.MIN_PACKET <= size <= cm.MAX_PACKET:
            raise ValueError(f"packet size {size} outside [{cm.MIN_PACKET}, {cm.MAX_PACKET}]")
        self.pid = pid
        self.data = data
        self.size = size
        self.origin = origin
        self.t_sent = t_sent
        self.meta = meta
        self.info = info
        self.lb_dst = None

    @property
    def internal_len(self) -> int:
        """Bytes moved inside the system: payload plus the optional hash."""
        return self.size + (META_BYTES if self.meta is not None else 0)

    def slot_bytes(self) -> bytes:
        if self.meta is None:
            return self.data
        return self.meta.to_bytes(META_BYTES, "big") + self.data

    def __repr__(self):
        return f"Packet(pid={self.pid}, size={self.size}, origin={self.origin})"


class Descriptor:
    """Slot-indexed handle passed between wrapper, core and scheduler."""

    __slots__ = ("slot", "data", "len", "port", "pkt")

    def __init__(self, slot: int, data: int, length: int, port: int, pkt: Packet | None = None):
        self.slot = slot
        self.data = data
        self.len = length
        self.port = port
        self.pkt = pkt

    def __repr__(self):
        return f"Descriptor(slot={self.slot}, data={self.data:#x}, len={self.len}, port={self.port})"


# ---------------------------------------------------------------- memory

class HybridMemory:
    """Core-local dmem/imem, shared packet memory and accelerator memory."""

    def __init__(self, layout, slots):
        self.layout = layout
        self.geometry = slots
        self.packet_mem = bytearray(layout.packet_mem_bytes)
        self.dmem = bytearray(layout.dmem_bytes)
        self.imem = bytearray(layout.imem_bytes)
        self.accel_mem = bytearray(layout.accel_bytes)
        self.regions = {
            "packet_mem": (0, self.packet_mem),
            "dmem": (layout.dmem_base, self.dmem),
            "imem": (layout.imem_base, self.imem),
            "accel_mem": (layout.accel_base, self.accel_mem),
        }
        spans = sorted((base, base + len(buf), name) for name, (base, buf) in self.regions.items())
        for (b0, e0, n0), (b1, _, n1) in zip(spans, spans[1:]):
            if b1 < e0:
                raise ConfigError(f"memory regions {n0} and {n1} overlap")
        self._hdr_off = slots.header_base - layout.dmem_base

    def slot_addr(self, slot: int) -> int:
        return self.geometry.base + slot * self.geometry.size

    def header_addr(self, slot: int) -> int:
        return self.geometry.header_base + slot * self.geometry.header_size

    def load_slot(self, slot: int, data: bytes) -> None:
        """DMA a packet into its slot and mirror the head into the header slot."""
        base = self.geometry.base + slot * self.geometry.size
        n = len(data)
        self.packet_mem[base:base + n] = data
        h = self.geometry.header_size
        off = self._hdr_off + slot * h
        self.dmem[off:off + (n if n < h else h)] = data[:h]

    def header(self, slot: int, n: int | None = None) -> bytes:
        h = self.geometry.header_size
        off = self._hdr_off + slot * h
        return bytes(self.dmem[off:off + (h if n is None else min(n, h))])

    def locate(self, addr: int, n: int = 1) -> tuple[str, bytearray, int]:
        for name, (base, buf) in self.regions.items():
            if base <= addr and addr + n <= base + len(buf):
                return name, buf, addr - base
        raise PortError(f"address range {addr:#x}+{n} is not inside one memory region")

    def read(self, addr: int, n: int) -> bytes:
        _, buf, off = self.locate(addr, n)
        return bytes(buf[off:off + n])

    def write(self, addr: int, data: bytes) -> None:
        _, buf, off = self.locate(addr, len(data))
        buf[off:off + len(data)] = data

    def dump(self, region: str) -> tuple[int, bytes]:
        if region not in self.regions:
            raise KeyError(f"unknown region {region!r}; have {sorted(self.regions)}")
        base, buf = self.regions[region]
        return base, bytes(buf)


class MemoryPorts:
    """Port assignment of the hybrid memory, in core cycles.

    dmem has a dedicated core port.  packet_mem has one port owned by the
    accelerators and one shared by the core and the DMA engine, with the
    core winning ties (the DMA loses that cycle).  accel_mem belongs to the
    accelerators; the DMA may use it only while they are idle.
    """

    def __init__(self):
        self._core_pm: list[tuple[int, int]] = []   # core busy intervals on the shared port
        self.accel_active = False
        self.dma_stall_cycles = 0

    def core_access(self, region: str, cycle: int, n: int = 1) -> int:
        """Core accesses are never delayed; returns the first cycle used."""
        if region == "dmem":
            return cycle
        if region == "packet_mem":
            self._core_pm.append((cycle, cycle + n))
            if len(self._core_pm) > 64:
                del self._core_pm[:32]
            return cycle
        if region == "accel_mem":
            raise PortError("the core has no port into accelerator memory")
        raise PortError(f"unknown region {region!r}")

    def accel_access(self, region: str, cycle: int, n: int = 1) -> int:
        if region in ("packet_mem", "accel_mem"):
            return cycle
        raise PortError(f"accelerators have no port into {region}")

    def dma_access(self, region: str, cycle: int, n: int = 1) -> int:
        """Cycle at which an ``n``-cycle DMA burst starting at ``cycle`` completes."""
        if region == "accel_mem":
            if self.accel_active:
                raise PortError("DMA into accelerator memory while the accelerator is active")
            return cycle + n
        if region == "dmem":
            raise PortError("the DMA engine writes headers through the wrapper, not dmem")
        if region != "packet_mem":
            raise PortError(f"unknown region {region!r}")
        end = cycle + n
        stalls = 0
        for s, e in self._core_pm:
            lo = max(s, cycle)
            hi = min(e, end + stalls)
            if hi > lo:
                stalls += hi - lo
        self.dma_stall_cycles += stalls
        return end + stalls


# ---------------------------------------------------------------- handlers

HANDLERS: dict[str, type] = {}


def register_handler(name: str):
    def deco(cls):
        HANDLERS[name] = cls
        cls.name = name
        return cls
    return deco


def make_handler(proc: "PacketProcessor", spec: HandlerSpec):
    try:
        cls = HANDLERS[spec.name]
    except KeyError:
        raise ConfigError(f"unknown handler {spec.name!r}; have {sorted(HANDLERS)}") from None
    return cls(proc, dict(spec.params or {}))


class Handler:
    """Base class for handler programs."""

    name = "base"
    cycles = 16
    irq_mask = IRQ_EVICT | IRQ_POKE

    def __init__(self, proc: "PacketProcessor", params: dict):
        self.proc = proc
        self.params = params

    def on_packet(self, ctx: "HandlerContext", desc: Descriptor) -> None:
        raise NotImplementedError

    def on_poke(self, ctx: "HandlerContext") -> None:
        pass

    def on_evict(self, ctx: "HandlerContext") -> None:
        pass

    def state_image(self) -> bytes:
        """Handler state saved to the host across a reload."""
        return b""

    def restore(self, image: bytes) -> None:
        pass


def _out_port(desc: Descriptor, flip: bool) -> int:
    port = desc.port
    if port == LOOPBACK or port == HOST:
        port = desc.pkt.origin if desc.pkt is not None else ETH0
    return port ^ 1 if flip and port in (ETH0, ETH1) else port


@register_handler("forwarder")
class Forwarder(Handler):
    """Read a descriptor and send it back out (16 cycles by default)."""

    def __init__(self, proc, params):
        super().__init__(proc, params)
        self.cycles = int(params.get("cycles", 16))
        mode = params.get("mode", "same")
        if mode not in ("same", "flip"):
            raise ConfigError(f"forwarder mode must be same or flip, got {mode!r}")
        self.flip = mode == "flip"

    def on_packet(self, ctx, desc):
        ctx.cycles += self.cycles
        ctx.actions.append((A_SEND, desc, _out_port(desc, self.flip)))


@register_handler("loopback_forwarder")
class LoopbackForwarder(Handler):
    """First half of two-step forwarding: pass every packet to another core.

    Targets are taken round-robin from ``targets`` starting at an offset that
    depends on this processor, so receivers spread over the transmitters.
    """

    def __init__(self, proc, params):
        super().__init__(proc, params)
        self.cycles = int(params.get("cycles", 23))
        targets = params.get("targets")
        if not targets:
            raise ConfigError("loopback_forwarder needs a non-empty targets list")
        self.targets = [int(t) for t in targets]
        if proc.pe in self.targets:
            raise ConfigError(f"processor {proc.pe} cannot loop back to itself")
        self._next = proc.pe % len(self.targets)

    def on_packet(self, ctx, desc):
        ctx.cycles += self.cycles
        dst = self.targets[self._next]
        self._next = (self._next + 1) % len(self.targets)
        ctx.loopback(desc, dst)


@register_handler("bcast_writer")
class BroadcastWriter(Handler):
    """Forwards packets; on a Poke it writes ``count`` broadcast words."""

    def __init__(self, proc, params):
        super().__init__(proc, params)
        self.cycles = int(params.get("cycles", 16))
        self.count = int(params.get("count", 1))
        self.addr = int(params.get("addr", 0))
        self.stride = int(params.get("stride", 4))
        self.seq = 0

    def on_packet(self, ctx, desc):
        ctx.cycles += self.cycles
        ctx.send(desc, _out_port(desc, False))

    def on_poke(self, ctx):
        region = self.proc.cfg.messaging.region_bytes
        for _ in range(self.count):
            addr = (self.addr + self.seq * self.stride) % region
            ctx.bcast_write(addr & ~3, (self.proc.pe << 24) | (self.seq & 0xFFFFFF))
            self.seq += 1


@register_handler("spin")
class Spin(Handler):
    """Charges a fixed, possibly huge, number of cycles; used to exercise the watchdog."""

    def __init__(self, proc, params):
        super().__init__(proc, params)
        self.cycles = int(params.get("cycles", 10_000_000))

    def on_packet(self, ctx, desc):
        ctx.charge(self.cycles)
        ctx.send(desc, _out_port(desc, False))


class HandlerContext:
    """What a handler sees while it runs on one descriptor (or interrupt)."""

    __slots__ = ("proc", "start_cycle", "cycles", "actions", "stall_cycles", "watchdog")

    def __init__(self, proc: "PacketProcessor"):
        self.proc = proc
        self.watchdog = proc.cfg.processor.watchdog_cycles
        self.start_cycle = 0
        self.cycles = 0
        self.stall_cycles = 0
        self.actions: list = []

    def reset(self, start_cycle: int):
        self.start_cycle = start_cycle
        self.cycles = 0
        self.stall_cycles = 0
        self.actions = []

    @property
    def now_cycle(self) -> int:
        return self.start_cycle + self.cycles

    def charge(self, n: int) -> None:
        self.cycles += n
        if self.cycles > self.watchdog:
            raise HandlerHang(f"handler exceeded {self.watchdog} cycles")

    # -- memory
    def header(self, desc: Descriptor, n: int | None = None) -> bytes:
        """First bytes of the packet from the dmem header slot (covered by base cost)."""
        return self.proc.mem.header(desc.slot, n)

    def read_packet(self, desc: Descriptor, offset: int, n: int) -> bytes:
        """Word-by-word core read of packet memory through the shared port."""
        words = -(-n // 4)
        self.proc.ports.core_access("packet_mem", self.now_cycle, words)
        self.charge(words)
        base = desc.data + offset
        return bytes(self.proc.mem.packet_mem[base:base + n])

    # -- accelerators
    def mmio_write(self, addr: int, value: int) -> None:
        dev, off = self.proc.mmio_lookup(addr)
        self.charge(self.proc.cfg.processor.mmio_cycles)
        dev.mmio_write(off, value, self.now_cycle)

    def mmio_read(self, addr: int) -> int:
        """Blocking read: stalls until the device reports the value ready."""
        dev, off = self.proc.mmio_lookup(addr)
        cycle = self.now_cycle
        value, ready = dev.mmio_read(off, cycle)
        if ready > cycle:
            self.stall_cycles += ready - cycle
            self.charge(ready - cycle)
        self.charge(self.proc.cfg.processor.mmio_cycles)
        return value

    # -- debug register
    def debug_write(self, value: int) -> None:
        self.proc.debug_to_host = value & 0xFFFF_FFFF_FFFF_FFFF

    def debug_read(self) -> int:
        return self.proc.debug_from_host

    # -- actions (take effect when the charged cycles have elapsed)
    def send(self, desc: Descriptor, port: int | None = None) -> None:
        self.actions.append((A_SEND, desc, desc.port if port is None else port))

    def drop(self, desc: Descriptor) -> None:
        desc.len = 0
        self.actions.append((A_SEND, desc, desc.port))

    def loopback(self, desc: Descriptor, dst: int) -> None:
        if dst == self.proc.pe:
            raise ValueError("loopback to the sending processor")
        self.actions.append((A_LOOPBACK, desc, dst))

    def hold(self, desc: Descriptor) -> None:
        self.actions.append((A_HOLD, desc, None))

    def bcast_write(self, addr: int, data: int) -> None:
        self.actions.append((A_BCAST, addr, data))


# ---------------------------------------------------------------- processor

class PeCounters:
    __slots__ = ("frames_in", "bytes_in", "frames_out", "bytes_out", "drops",
                 "oversize_drops", "faults", "hangs", "busy_ps",
                 "loopbacks", "handled")

    def __init__(self):
        for name in self.__slots__:
            setattr(self, name, 0)

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.__slots__}


class PacketProcessor:
    """One processor: wrapper + hybrid memory + handler core.

    ``system`` supplies the shared parts: ``scheduler``, ``ctrl`` (control
    channel), ``tx_port(iface)``, ``messaging``, ``on_egress`` and
    ``check``.  It is attached by :class:`mboxsim.sim.system.System`.
    """

    def __init__(self, pe: int, cfg: SimConfig, loop: EventLoop, system=None):
        self.pe = pe
        self.cluster = pe // cfg.pes_per_cluster
        self.cfg = cfg
        self.loop = loop
        self.system = system
        self.cyc = cfg.cycle_ps
        self.mem = HybridMemory(cfg.memory, cfg.slots)
        self.ports = MemoryPorts()
        n = cfg.slots.count
        self.slot_state = [FREE] * n
        self.owned = 0               # slots not in the free state
        self.notices_in_flight = 0   # freed notices on the control channel
        self.epoch = 0
        self.rx: deque[Descriptor] = deque()
        self.core_busy = False
        self.busy_until = 0
        self.paused = False
        self.hung = False
        self.evicted = False
        self.irq_mask = 0
        self.irq_pending = 0
        self.debug_to_host = 0
        self.debug_from_host = 0
        self.counters = PeCounters()
        self.mmio_devices: dict[int, object] = {}
        self._boundary_waiters: list[Callable] = []
        self.on_evicted: Callable | None = None
        self._tx: deque = deque()
        self._tx_busy = False
        self._tx_sync = False
        self.out_free_at = 0
        self._dma_post = cfg.processor.dma_setup_cycles * self.cyc
        self._tx_setup = cfg.processor.tx_setup_cycles * self.cyc
        self._egress = cfg.fabric.egress_stage_cycles * self.cyc
        self._narrow = cfg.narrow_gbps()
        self._ser_cache: dict[int, int] = {}
        self.ctx = HandlerContext(self)
        self.handler: Handler | None = None
        self.load_handler(cfg.handlers.for_pe(pe))

    # -- setup
    def load_handler(self, spec: HandlerSpec) -> None:
        self.mmio_devices.clear()
        self.handler = make_handler(self, spec)
        self.irq_mask = self.handler.irq_mask

    def attach_device(self, offset: int, device) -> None:
        if offset % IO_EXT_WINDOW:
            raise ValueError("device offset must be window aligned")
        self.mmio_devices[offset] = device

    def mmio_lookup(self, addr: int):
        rel = addr - IO_EXT_BASE
        window = rel - rel % IO_EXT_WINDOW
        dev = self.mmio_devices.get(window)
        if rel < 0 or dev is None or not dev.has_register(rel - window):
            raise MmioFault(addr)
        return dev, rel - window

    def _ser(self, nbytes: int) -> int:
        ps = self._ser_cache.get(nbytes)
        if ps is None:
            ps = self._ser_cache[nbytes] = cm.serialization_ps(nbytes, self._narrow)
        return ps

    # -- slot state machine
    def _set(self, slot: int, new: int) -> None:
        old = self.slot_state[slot]
        if new not in _NEXT[old]:
            raise InvariantViolation(
                f"pe{self.pe} slot {slot}: illegal transition "
                f"{SLOT_STATE_NAMES[old]} -> {SLOT_STATE_NAMES[new]}", self.loop.now)
        self.slot_state[slot] = new
        if old == FREE:
            self.owned += 1
        elif new == FREE:
            self.owned -= 1

    def claim(self, slot: int) -> None:
        """Scheduler assigned ``slot`` to an incoming packet."""
        self._set(slot, ASSIGNED)

    def _free(self, slot: int) -> None:
        self._set(slot, FREE)
        sys_ = self.system
        if sys_ is not None:
            self.notices_in_flight += 1
            sys_.ctrl.send("slot_freed", self._notice_arrives, slot, self.epoch)

    def _notice_arrives(self, slot: int, epoch: int) -> None:
        self.notices_in_flight -= 1
        self.system.scheduler.on_slot_freed(self.pe, slot, epoch)

    def slot_census(self) -> list[int]:
        counts = [0] * len(SLOT_STATE_NAMES)
        for s in self.slot_state:
            counts[s] += 1
        return counts

    # -- ingress
    def dma_post_ps(self) -> int:
        return self._dma_post

    def on_loaded(self, item, first_byte_ps: int) -> None:
        """Narrow-link sink: the last byte is in packet memory and DMA setup is done."""
        pkt, slot, iface = item
        n = pkt.internal_len
        if n > self.cfg.slots.size:
            self.counters.drops += 1
            self.counters.oversize_drops += 1
            self._free(slot)
            if self.system is not None:
                self.system.on_pe_drop(self.pe, pkt, "oversize")
            return
        self.mem.load_slot(slot, pkt.slot_bytes() if pkt.meta is not None else pkt.data)
        self._set(slot, LOADED)
        c = self.counters
        c.frames_in += 1
        c.bytes_in += n
        self.rx.append(Descriptor(slot, self.mem.slot_addr(slot), n, iface, pkt))
        if not self.core_busy:
            self._dispatch()

    def ingest(self, pkt: Packet, slot: int, iface: int | None = None) -> None:
        """Direct load (bypassing the fabric), for tests and host injection."""
        self.on_loaded((pkt, slot, pkt.origin if iface is None else iface), self.loop.now)

    # -- core
    def _dispatch(self) -> None:
        if self.core_busy or self.hung:
            return
        if self._boundary_waiters:
            waiters, self._boundary_waiters = self._boundary_waiters, []
            for fn in waiters:
                fn()
        pending = self.irq_pending & self.irq_mask
        if pending:
            self._run_irq(pending)
            return
        if self.paused or not self.rx:
            return
        desc = self.rx.popleft()
        self._set(desc.slot, CORE)
        ctx = self.ctx
        now = self.loop.now
        ctx.reset(now // self.cyc)
        try:
            self.handler.on_packet(ctx, desc)
        except MmioFault as exc:
            self.counters.faults += 1
            self.debug_to_host = DEBUG_FAULT_MMIO | (exc.addr & 0xFFFF_FFFF)
            log.info("pe%d: %s; descriptor dropped", self.pe, exc)
            desc.len = 0
            ctx.actions = [(A_SEND, desc, desc.port)]
        except HandlerHang:
            self._hang(desc)
            return
        self.counters.handled += 1
        self._start(ctx.cycles, ctx.actions)

    def _start(self, cycles: int, actions: list) -> None:
        dur = cycles * self.cyc
        self.core_busy = True
        now = self.loop.now
        self.busy_until = now + dur
        self.counters.busy_ps += dur
        self.loop.at(now + dur, self._core_done, actions, 0)

    def _hang(self, desc: Descriptor) -> None:
        self.hung = True
        self.core_busy = True
        self.counters.hangs += 1
        self.debug_to_host = DEBUG_HANG | (self.pe & 0xFFFF)
        log.warning("pe%d: handler watchdog expired on slot %d", self.pe, desc.slot)

    def _run_irq(self, pending: int) -> None:
        ctx = self.ctx
        ctx.reset(self.loop.now // self.cyc)
        if pending & IRQ_EVICT:
            self.irq_pending &= ~IRQ_EVICT
            self.handler.on_evict(ctx)
            self.evicted = True
            self._start(ctx.cycles, ctx.actions + [("evicted",)])
        else:
            self.irq_pending &= ~IRQ_POKE
            self.handler.on_poke(ctx)
            self._start(ctx.cycles, ctx.actions)

    def _core_done(self, actions: list, idx: int) -> None:
        n = len(actions)
        while idx < n:
            act = actions[idx]
            kind = act[0]
            if kind == A_SEND:
                self._emit(act[1], act[2])
            elif kind == A_BCAST:
                # Each broadcast write costs core time and may block on a full FIFO.
                self._bcast_step(actions, idx)
                return
            elif kind == A_LOOPBACK:
                self._request_loopback(act[1], act[2])
            elif kind == A_HOLD:
                self._set(act[1].slot, HELD)
            elif kind == "evicted":
                if self.on_evicted is not None:
                    self.on_evicted(self.pe)
            idx += 1
        self.core_busy = False
        self._dispatch()

    def _bcast_step(self, actions: list, idx: int) -> None:
        """Issue one broadcast write; the core is stuck until the FIFO accepts it."""
        _, addr, data = actions[idx]
        t0 = self.loop.now

        def written():
            self.counters.busy_ps += self.loop.now - t0
            self._core_done(actions, idx + 1)
        self.system.messaging.write(self.pe, addr, data, written)

    # -- egress
    def _emit(self, desc: Descriptor, port: int) -> None:
        if self.slot_state[desc.slot] == CORE or self.slot_state[desc.slot] == HELD:
            self._set(desc.slot, TRANSMITTING)
        if desc.len == 0:
            self.counters.drops += 1
            self._free(desc.slot)
            if self.system is not None:
                self.system.on_pe_drop(self.pe, desc.pkt, "handler")
            return
        self._tx.append((desc, port))
        if not self._tx_busy:
            self._tx_next()

    def _footprint(self, desc: Descriptor, port: int) -> int:
        if port == LOOPBACK:
            return desc.len + self.cfg.fabric.loopback_header_bytes
        if desc.pkt is not None and desc.pkt.meta is not None:
            return desc.len - META_BYTES
        return desc.len

    def _tx_next(self) -> None:
        """Ask the head's target port for FIFO space, in descriptor order."""
        while self._tx:
            desc, port = self._tx[0]
            self._tx_busy = True
            self._tx_sync = True
            ok = self.system.tx_port(port).request(
                self.pe, self._footprint(desc, port), self._tx_granted)
            self._tx_sync = False
            if not ok:
                return
        self._tx_busy = False

    def _tx_granted(self) -> None:
        desc, port = self._tx.popleft()
        now = self.loop.now
        start = (now if now > self.out_free_at else self.out_free_at) + self._tx_setup
        end = start + self._ser(desc.len)
        self.out_free_at = end
        self.loop.at(end, self._readout_done, desc, port)
        if not self._tx_sync:
            self._tx_next()

    def _readout_done(self, desc: Descriptor, port: int) -> None:
        c = self.counters
        c.frames_out += 1
        c.bytes_out += desc.len
        self._free(desc.slot)
        self.system.on_egress(self.pe, desc, port, self.loop.now + self._egress,
                              self._footprint(desc, port))

    def _request_loopback(self, desc: Descriptor, dst: int) -> None:
        self.counters.loopbacks += 1
        self.system.request_loopback(self.pe, dst, desc, self._loopback_granted)

    def _loopback_granted(self, desc: Descriptor, dst: int, dst_slot: int) -> None:
        desc.pkt.lb_dst = (dst, dst_slot)
        self._emit(desc, LOOPBACK)

    # -- host control
    def interrupt(self, bits: int) -> None:
        self.irq_pending |= bits
        if not self.core_busy:
            self._dispatch()

    def pause(self) -> None:
        self.paused = True

    def resume(self) -> None:
        self.paused = False
        if not self.core_busy:
            self._dispatch()

    def at_boundary(self, fn: Callable) -> None:
        """Run ``fn`` when the core is between packets (now if it already is)."""
        if not self.core_busy and not self.hung:
            fn()
        else:
            self._boundary_waiters.append(fn)

    def dump_memory(self, region: str, callback: Callable[[int, bytes], None]) -> None:
        """Snapshot a region at the next packet boundary (never torn)."""
        self.at_boundary(lambda: callback(*self.mem.dump(region)))

    def read_debug(self) -> int:
        return self.debug_to_host

    def write_debug(self, value: int) -> None:
        self.debug_from_host = value & 0xFFFF_FFFF_FFFF_FFFF

    def stalled_cycles(self, now: int | None = None) -> int:
        now = self.loop.now if now is None else now
        busy = self.counters.busy_ps
        if self.core_busy and self.busy_until > now:
            busy -= self.busy_until - now
        return max(0, now - busy) // self.cyc

    def read_counters(self) -> dict:
        c = self.counters
        return {
            "bytes": c.bytes_in,
            "frames": c.frames_in,
            "drops": c.drops,
            "stalled_cycles": self.stalled_cycles(),
        }

    def reset_for_reload(self, spec: HandlerSpec | None) -> None:
        """Fresh logic after a partial reload: slots empty, new epoch."""
        if self.owned:
            raise InvariantViolation(f"pe{self.pe}: reload with {self.owned} slots in use",
                                     self.loop.now)
        self.epoch += 1
        self.rx.clear()
        self.core_busy = False
        self.hung = False
        self.evicted = False
        self.irq_pending = 0
        if spec is not None:
            self.load_handler(spec)
