"""Timed model of swapping one processor's logic while traffic keeps flowing.

Sequence: the scheduler stops assigning to the processor, the wrapper lets
in-flight packets finish, the core gets an Evict interrupt and hands back
its state, the state goes to the host, the region is reloaded, the state
comes back, slots are re-registered under a new epoch and the processor is
enabled again.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .. import core_model as cm
from ..processor import IRQ_EVICT
from .events import InvariantViolation

log = logging.getLogger(__name__)

DRAIN_POLL_CYCLES = 64


@dataclass
class ReconfigRecord:
    pe: int
    steps: list = field(default_factory=list)   # (name, time ps)
    state_bytes: int = 0
    drops_before: int = 0
    drops_after: int = 0

    def time_of(self, name: str) -> int | None:
        for n, t in self.steps:
            if n == name:
                return t
        return None

    @property
    def reload_ps(self) -> int:
        return self.time_of("reload_done") - self.time_of("reload_start")

    @property
    def done(self) -> bool:
        return self.time_of("enabled") is not None


class Reconfigurator:
    def __init__(self, system, spec):
        self.sys = system
        self.spec = spec
        self.pe = spec.pe
        self.rec = ReconfigRecord(spec.pe)
        self.image = b""
        fab = system.cfg.fabric
        self._host_rate = fab.host_gbps
        self._host_lat = fab.host_latency_ps

    def _mark(self, name: str) -> None:
        self.rec.steps.append((name, self.sys.loop.now))
        log.info("reconfig pe%d: %s at %d ps", self.pe, name, self.sys.loop.now)

    def start(self) -> None:
        s = self.sys
        self.rec.drops_before = sum(s.pe_drops.values()) + sum(
            i.rx_drops for i in s.ingress.values())
        self._mark("disable")
        already = s.scheduler.disabled[self.pe]
        s.scheduler.disable(self.pe)
        if already and self._drained():
            # Nothing can be in flight on a disabled, drained processor.
            self._mark("drained")
            self._evicted(self.pe)
            return
        self._poll()

    def _drained(self) -> bool:
        s = self.sys
        p = s.processors[self.pe]
        sched = s.scheduler
        return (p.owned == 0 and p.notices_in_flight == 0 and not p.rx and not p.core_busy
                and sched.credits(self.pe) == sched.registered[self.pe])

    def _poll(self) -> None:
        if self._drained():
            self._mark("drained")
            p = self.sys.processors[self.pe]
            p.on_evicted = self._evicted
            self._mark("evict_irq")
            p.interrupt(IRQ_EVICT)
            return
        self.sys.loop.after(DRAIN_POLL_CYCLES * self.sys.cyc, self._poll)

    def _transfer_ps(self, nbytes: int) -> int:
        return cm.serialization_ps(nbytes, self._host_rate) + self._host_lat

    def _evicted(self, pe: int) -> None:
        p = self.sys.processors[pe]
        p.on_evicted = None
        self._mark("evicted")
        self.image = p.handler.state_image() if p.handler is not None else b""
        n = self.spec.state_bytes
        if n is None:
            n = max(len(self.image), self.sys.cfg.memory.dmem_bytes)
        self.rec.state_bytes = n
        self._mark("save_start")
        self.sys.loop.after(self._transfer_ps(n), self._saved)

    def _saved(self) -> None:
        self._mark("saved")
        self._mark("reload_start")
        reload_ps = round(self.spec.reload_ms * cm.PS_PER_MS)
        self.sys.loop.after(reload_ps, self._reloaded)

    def _reloaded(self) -> None:
        self._mark("reload_done")
        s = self.sys
        p = s.processors[self.pe]
        if p.owned:
            raise InvariantViolation(f"pe{self.pe}: slots in use across a reload", s.loop.now)
        p.reset_for_reload(self.spec.handler)
        self.sys.loop.after(self._transfer_ps(self.rec.state_bytes), self._restored)

    def _restored(self) -> None:
        s = self.sys
        p = s.processors[self.pe]
        if p.handler is not None:
            p.handler.restore(self.image)
        self._mark("restored")
        sched = s.scheduler
        sched.flush(self.pe)
        p.epoch = sched.epoch[self.pe]
        cfg = s.cfg
        sched.register_slots(self.pe, cfg.slots.count, cfg.slots.size)
        self._mark("registered")
        sched.enable(self.pe)
        self._mark("enabled")
        self.rec.drops_after = sum(s.pe_drops.values()) + sum(
            i.rx_drops for i in s.ingress.values())


def schedule_reconfig(system, spec) -> Reconfigurator:
    r = Reconfigurator(system, spec)
    system.reconfigs.append(r.rec)
    system.loop.at(cm.us(spec.at_us), r.start)
    return r


def reconfigure_pe(system, pe: int, new_handler=None, at_us: float | None = None,
                   reload_ms: float = 756.0, state_bytes: int | None = None) -> ReconfigRecord:
    """Schedule a reconfiguration of ``pe`` (now, or at ``at_us``) and return its record."""
    from .config import ReconfigSpec
    t = system.loop.now if at_us is None else cm.us(at_us)
    spec = ReconfigSpec(pe=pe, at_us=t / cm.PS_PER_US, reload_ms=reload_ms,
                        state_bytes=state_bytes, handler=new_handler)
    r = Reconfigurator(system, spec)
    system.reconfigs.append(r.rec)
    system.loop.at(t, r.start)
    return r.rec
