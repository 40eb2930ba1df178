"""Whole-system wiring: tester ports, MACs, scheduler, fabric and processors.

Packet path (ingress): tester serializes the frame onto its 100G link; the
MAC holds it for ``rx_fixed_ps`` and queues it in the RX FIFO (the only
place packets are dropped for lack of room).  The interface asks the
scheduler for a slot, one decision per cycle; the packet crosses the wide
and cluster stages and lands in the target processor's per-interface FIFO,
from where the processor's narrow link moves it into packet memory.

Egress: the processor reads the packet out over its narrow link into the
port's store-and-forward TX FIFO; the port serializes it onto the wire.
"""

from __future__ import annotations

import logging
from array import array
from bisect import bisect_left, bisect_right
from collections import deque
from dataclasses import dataclass

from .. import core_model as cm
from ..fabric import (ETH0, ETH1, HOST, IFACE_NAMES, LOOPBACK, NUM_IFACES, ControlChannel,
                      NarrowLink, TxPort)
from ..messaging import BroadcastNetwork
from ..processor import ASSIGNED, FREE, META_BYTES, Packet, PacketProcessor
from ..scheduler import Scheduler
from . import traffic as tr
from .config import SimConfig
from .events import EventLoop, InvariantViolation

log = logging.getLogger(__name__)


class Tester:
    """One tester link: pulls frames from a source and serializes them at line rate."""

    def __init__(self, system: "System", port: int, source, stop_at: int | None = None):
        self.sys = system
        self.stop_at = stop_at
        self.port = port
        self.items = iter(source)
        self.free_at = 0
        self.sent = 0
        self.sent_bytes = 0
        self.first_start: int | None = None
        self.last_end = 0
        self.done = False
        mac = system.cfg.mac
        self._rate = mac.link_gbps
        self._framing = mac.framing_bytes
        self._rx_fixed = mac.rx_fixed_ps
        self._ser: dict[int, int] = {}

    def next(self) -> None:
        item = next(self.items, None)
        if item is None:
            self.done = True
            return
        t_req, data, info = item
        n = len(data)
        ser = self._ser.get(n)
        if ser is None:
            ser = self._ser[n] = cm.serialization_ps(n + self._framing, self._rate)
        start = t_req if t_req > self.free_at else self.free_at
        if self.stop_at is not None and start >= self.stop_at:
            self.done = True
            return
        end = start + ser
        self.free_at = end
        if self.first_start is None:
            self.first_start = start
        self.last_end = end
        self.sent += 1
        self.sent_bytes += n
        s = self.sys
        s.next_pid += 1
        pkt = Packet(s.next_pid, data, self.port, start, None, info, False)
        s.loop.at(end + self._rx_fixed, s.ingress[self.port].arrive, pkt)


class IngressPort:
    """MAC RX FIFO plus the interface's side of the scheduler handshake."""

    def __init__(self, system: "System", iface: int):
        cfg = system.cfg
        self.sys = system
        self.loop = system.loop
        self.iface = iface
        self.capacity = cfg.mac.rx_fifo_bytes
        self.queue: deque[Packet] = deque()
        self.used = 0
        self.max_used = 0
        self.arrived = 0
        self.arrived_bytes = 0
        self.rx_drops = 0
        self.oversize_drops = 0
        self.dispatched = 0
        self.dispatched_bytes = 0
        self.blocked = False
        self.blocked_since = 0
        self.blocked_ps = 0
        self.next_free = 0
        self._kick_at: int | None = None
        cyc = cfg.cycle_ps
        self._dec_ps = cfg.scheduler.decision_cycles * cyc
        self._path_ps = (cfg.scheduler.decision_cycles + cfg.fabric.wide_stage_cycles
                         + cfg.fabric.narrow_stage_cycles) * cyc
        self._wide = cfg.wide_gbps()
        self._limit = cfg.slots.size - (META_BYTES if cfg.scheduler.policy == "hash" else 0)
        self._wide_ser: dict[int, int] = {}
        self.tester: Tester | None = None

    def arrive(self, pkt: Packet) -> None:
        if self.tester is not None:
            self.tester.next()
        self.arrived += 1
        n = pkt.size
        self.arrived_bytes += n
        if self.used + n > self.capacity:
            self.rx_drops += 1
            self.sys.rx_drop(self.iface, pkt)
            return
        self.queue.append(pkt)
        self.used += n
        if self.used > self.max_used:
            self.max_used = self.used
        if self._kick_at is None and not self.blocked:
            self.kick()

    def kick(self) -> None:
        now = self.loop.now
        if now < self.next_free:
            if self._kick_at is None:
                self._kick_at = self.next_free
                self.loop.at(self.next_free, self._kicked)
            return
        self._dispatch()

    def _kicked(self) -> None:
        self._kick_at = None
        if not self.blocked:
            self._dispatch()

    def wake(self) -> None:
        if self.blocked:
            self.blocked = False
            self.blocked_ps += self.loop.now - self.blocked_since
            if self._kick_at is None:
                self.kick()

    def _dispatch(self) -> None:
        q = self.queue
        s = self.sys
        sched = s.scheduler
        now = self.loop.now
        while q:
            pkt = q[0]
            n = pkt.size
            if n > self._limit:
                q.popleft()
                self.used -= n
                self.oversize_drops += 1
                s.iface_drop(self.iface, pkt)
                continue
            r = sched.assign(pkt, n, self.wake)
            if r is None:
                self.blocked = True
                self.blocked_since = now
                return
            pe, slot = r
            q.popleft()
            self.used -= n
            self.dispatched += 1
            self.dispatched_bytes += n
            internal = pkt.internal_len
            link = s.links[pe]
            link.reserve(self.iface)
            s.fabric_in_flight += 1
            self.loop.at(now + self._path_ps, link.arrive, self.iface,
                         (pkt, slot, self.iface), internal)
            ws = self._wide_ser.get(internal)
            if ws is None:
                ws = self._wide_ser[internal] = cm.serialization_ps(internal, self._wide)
            self.next_free = now + (ws if ws > self._dec_ps else self._dec_ps)
            if q:
                self._kick_at = self.next_free
                self.loop.at(self.next_free, self._kicked)
            return

    def stalled_cycles(self, cyc: int) -> int:
        extra = self.loop.now - self.blocked_since if self.blocked else 0
        return (self.blocked_ps + extra) // cyc


@dataclass
class Census:
    offered: int
    rx_drops: int
    iface_drops: int
    queued: int
    accepted: int
    delivered: int
    pe_drops: int
    in_fabric: int
    in_pes: int
    not_arrived: int = 0

    @property
    def in_flight(self) -> int:
        return self.queued + self.in_fabric + self.in_pes

    def check(self) -> None:
        if self.accepted != self.delivered + self.pe_drops + self.in_fabric + self.in_pes:
            raise InvariantViolation(
                f"conservation: accepted {self.accepted} != delivered {self.delivered} + "
                f"pe drops {self.pe_drops} + fabric {self.in_fabric} + in processors {self.in_pes}")
        if self.offered != self.rx_drops + self.iface_drops + self.queued + self.accepted:
            raise InvariantViolation(
                f"conservation: offered {self.offered} != rx drops {self.rx_drops} + "
                f"iface drops {self.iface_drops} + queued {self.queued} + accepted {self.accepted}")


class System:
    """Everything between the two tester links, for one configuration."""

    def __init__(self, cfg: SimConfig, rules=None, keep_latencies: bool = True):
        cfg.validate()
        self.cfg = cfg
        self.loop = EventLoop(trace=cfg.run.trace_events)
        cyc = cfg.cycle_ps
        self.cyc = cyc
        self.check = cfg.run.check_invariants
        self.next_pid = 0
        self.processors = [PacketProcessor(pe, cfg, self.loop, self) for pe in range(cfg.num_pes)]
        self.scheduler = Scheduler(self.loop, cfg.num_pes, cfg.scheduler.policy,
                                   cfg.scheduler.ingress_pes, self.processors, self.check)
        self.ctrl = ControlChannel(self.loop, cfg.fabric.ctrl_cycles * cyc)
        narrow = cfg.narrow_gbps()
        depth = cfg.fabric.fifo_depth + cfg.fabric.boundary_regs
        post = cfg.processor.dma_setup_cycles * cyc
        self.links = [NarrowLink(self.loop, pe, narrow, depth, self._sink(pe), post)
                      for pe in range(cfg.num_pes)]
        mac, fab = cfg.mac, cfg.fabric
        n = cfg.num_pes
        self.tx_ports = {
            ETH0: TxPort(self.loop, "eth0", mac.link_gbps, mac.framing_bytes, mac.tx_fixed_ps,
                         fab.tx_fifo_bytes, n),
            ETH1: TxPort(self.loop, "eth1", mac.link_gbps, mac.framing_bytes, mac.tx_fixed_ps,
                         fab.tx_fifo_bytes, n),
            HOST: TxPort(self.loop, "host", fab.host_gbps, 0, fab.host_latency_ps,
                         fab.tx_fifo_bytes, n),
            LOOPBACK: TxPort(self.loop, "loopback", fab.loopback_gbps, 0, 0,
                             fab.tx_fifo_bytes, n),
        }
        self._lb_path_ps = (fab.wide_stage_cycles + fab.narrow_stage_cycles) * cyc
        self.messaging = BroadcastNetwork(self.loop, cfg)
        self.ingress = {ETH0: IngressPort(self, ETH0), ETH1: IngressPort(self, ETH1)}
        self.testers: list[Tester] = []
        self.rules = rules
        # counters
        self.fabric_in_flight = 0
        self.delivered = [0] * NUM_IFACES
        self.delivered_bytes = [0] * NUM_IFACES
        self.pe_drops: dict[str, int] = {}
        self.lb_in = 0
        self.lb_out = 0
        self.keep_latencies = keep_latencies
        self.latencies = array("q")
        self.deliver_times = array("q")
        self.delivered_pkts: list | None = None
        self.dropped_pkts: list | None = None
        self.egress_log: list | None = None
        self.reconfigs: list = []
        for pe in range(n):
            self.scheduler.register_slots(pe, cfg.slots.count, cfg.slots.size)

    # -- wiring helpers
    def _sink(self, pe: int):
        proc_loaded = None

        def sink(item, first_byte_ps):
            nonlocal proc_loaded
            self.fabric_in_flight -= 1
            if item[2] == LOOPBACK:
                self.lb_out += 1
            if proc_loaded is None:
                proc_loaded = self.processors[pe].on_loaded
            proc_loaded(item, first_byte_ps)
        return sink

    def tx_port(self, iface: int) -> TxPort:
        return self.tx_ports[iface]

    # -- traffic
    def attach_traffic(self, spec=None, seed: int | None = None) -> None:
        spec = spec or self.cfg.traffic
        seed = self.cfg.run.seed if seed is None else seed
        rules = self.rules
        if spec.payload == "mixed" and rules is None:
            from ..accelerators import default_rules_path, load_rules
            rules = self.rules = load_rules(default_rules_path())
        stop = None
        if spec.duration_us is not None and spec.mode in ("full", "paced"):
            stop = cm.us(spec.start_us) + cm.us(spec.duration_us)
        for src in tr.build_sources(spec, seed, self.cfg.mac.link_gbps,
                                    self.cfg.mac.framing_bytes, rules):
            t = Tester(self, src.port, src, stop)
            self.testers.append(t)
            self.ingress[src.port].tester = t
            t.next()

    def inject(self, port: int, data: bytes, t_ps: int, info=None) -> Packet:
        """Schedule one frame to be fully received by MAC ``port`` at ``t_ps``."""
        self.next_pid += 1
        pkt = Packet(self.next_pid, data, port, t_ps, None, info, False)
        mac = self.cfg.mac
        arr = t_ps + cm.serialization_ps(len(data) + mac.framing_bytes, mac.link_gbps) + mac.rx_fixed_ps
        self.loop.at(arr, self.ingress[port].arrive, pkt)
        return pkt

    # -- events from processors
    def on_egress(self, pe: int, desc, port: int, arrival: int, footprint: int) -> None:
        pkt = desc.pkt
        if port == LOOPBACK:
            _, end = self.tx_ports[LOOPBACK].submit(footprint, arrival, footprint)
            dst, slot = pkt.lb_dst
            pkt.lb_dst = None
            self.lb_in += 1
            self.fabric_in_flight += 1
            self.loop.at(end + self._lb_path_ps, self._lb_land, dst, pkt, slot)
            return
        tx = self.tx_ports[port]
        start, done = tx.submit(footprint, arrival, footprint)
        self.delivered[port] += 1
        self.delivered_bytes[port] += footprint
        if port != HOST and self.keep_latencies:
            self.latencies.append(done - pkt.t_sent)
            self.deliver_times.append(done)
        if self.delivered_pkts is not None:
            self.delivered_pkts.append((pkt, port, pe, done))
        if self.egress_log is not None:
            self.egress_log.append((pkt.pid, pe, port, start, done))

    def _lb_land(self, dst: int, pkt: Packet, slot: int) -> None:
        self.links[dst].arrive(LOOPBACK, (pkt, slot, LOOPBACK), pkt.internal_len)

    def on_pe_drop(self, pe: int, pkt, reason: str) -> None:
        self.pe_drops[reason] = self.pe_drops.get(reason, 0) + 1
        if self.dropped_pkts is not None:
            self.dropped_pkts.append((pkt, pe, reason))

    def rx_drop(self, iface: int, pkt) -> None:
        pass

    def iface_drop(self, iface: int, pkt) -> None:
        if self.dropped_pkts is not None:
            self.dropped_pkts.append((pkt, None, "oversize"))

    def request_loopback(self, src: int, dst: int, desc, granted) -> None:
        """Ask the scheduler (over the control channel) for a slot of ``dst``."""
        if not 0 <= dst < self.cfg.num_pes or dst == src:
            raise InvariantViolation(f"pe{src}: bad loopback destination {dst}", self.loop.now)

        def grant(slot):
            self.links[dst].reserve(LOOPBACK)
            self.ctrl.send("slot_grant", granted, desc, dst, slot)

        self.ctrl.send("slot_request", self.scheduler.request_loopback_slot, dst, grant)

    # -- running
    def run(self, until_ps: int | None = None) -> int:
        if until_ps is None and self.cfg.run.horizon_us is not None:
            until_ps = cm.us(self.cfg.run.horizon_us)
        t = self.loop.run(until_ps)
        if self.check:
            self.census().check()
        return t

    def census(self) -> Census:
        in_pes = 0
        for p in self.processors:
            for st in p.slot_state:
                if st != FREE and st != ASSIGNED:
                    in_pes += 1
        ing = self.ingress.values()
        offered = sum(i.arrived for i in ing)
        return Census(
            offered=offered,
            rx_drops=sum(i.rx_drops for i in ing),
            iface_drops=sum(i.oversize_drops for i in ing),
            queued=sum(len(i.queue) for i in ing),
            accepted=sum(i.dispatched for i in ing),
            delivered=sum(self.delivered),
            pe_drops=sum(self.pe_drops.values()),
            in_fabric=self.fabric_in_flight,
            in_pes=in_pes,
            not_arrived=sum(t.sent for t in self.testers) - offered,
        )

    # -- measurement helpers
    def offered_window(self) -> tuple[int, int]:
        starts = [t.first_start for t in self.testers if t.first_start is not None]
        ends = [t.last_end for t in self.testers]
        return (min(starts) if starts else 0), (max(ends) if ends else 0)

    def delivered_between(self, lo: int, hi: int) -> int:
        times = sorted(self.deliver_times)
        return bisect_right(times, hi) - bisect_left(times, lo)

    def rx_stalled_cycles(self, iface: int) -> int:
        ing = self.ingress.get(iface)
        return ing.stalled_cycles(self.cyc) if ing is not None else 0


def build_system(cfg: SimConfig, traffic: bool = True, rules=None) -> System:
    system = System(cfg, rules)
    if traffic:
        system.attach_traffic()
    for spec in cfg.reconfig:
        from .reconfig import schedule_reconfig
        schedule_reconfig(system, spec)
    return system


IFACE_LABELS = IFACE_NAMES
