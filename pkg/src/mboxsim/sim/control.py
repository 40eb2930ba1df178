"""Host-side control of a running system: registers, counters, debug, dumps.

Every request travels over the control channel, so a register read
returns after one request and one response latency of simulated time
while traffic keeps flowing.
"""

from __future__ import annotations

import hashlib
import json
import re
from pathlib import Path

from .. import core_model as cm
from ..processor import IRQ_EVICT, IRQ_POKE
from ..scheduler import ERROR_VALUE, REGISTER_MAP, describe_register_map, register_address

IRQ_NAMES = {"evict": IRQ_EVICT, "poke": IRQ_POKE}
PE_ITEMS = ("counters", "debug", "dump", "irq", "pause", "resume")

_REG = re.compile(r"^([A-Za-z_]+)(?:\[(\d+)\]|\+(\d+))?$")


class ControlError(ValueError):
    pass


def parse_register(text: str) -> int:
    """``CREDITS[3]``, ``CREDITS+3``, ``POLICY`` or a raw address like ``0x103``."""
    t = text.strip()
    if re.fullmatch(r"0[xX][0-9a-fA-F]+|\d+", t):
        return int(t, 0)
    m = _REG.match(t)
    if not m:
        raise ControlError(f"cannot parse register {text!r}\n{describe_register_map()}")
    name, a, b = m.groups()
    idx = a if a is not None else b
    try:
        return register_address(name, None if idx is None else int(idx))
    except KeyError as exc:
        raise ControlError(exc.args[0]) from None


def register_names() -> list[str]:
    return [name for _, name, _, _ in REGISTER_MAP]


def parse_target(text: str, num_pes: int):
    """``sched`` or ``pN``; returns "sched" or the processor index."""
    t = text.strip().lower()
    if t in ("sched", "scheduler"):
        return "sched"
    m = re.fullmatch(r"(?:p|pe)(\d+)", t)
    if not m:
        raise ControlError(f"unknown target {text!r}; use sched or p0..p{num_pes - 1}")
    pe = int(m.group(1))
    if pe >= num_pes:
        raise ControlError(f"no processor {pe}; have p0..p{num_pes - 1}")
    return pe


class HostControl:
    def __init__(self, system):
        self.sys = system
        self.lat = system.ctrl.latency_ps
        self.log: list[str] = []

    @property
    def now(self) -> int:
        return self.sys.loop.now

    def _roundtrip(self, fn, *args):
        box = []

        def at_target():
            value = fn(*args)
            self.sys.ctrl.send("host_reply", box.append, value)

        self.sys.ctrl.send("host_request", at_target)
        self.advance_ps(2 * self.lat)
        if not box:
            raise ControlError("no reply on the control channel")
        return box[0]

    def advance_ps(self, ps: int) -> None:
        self.sys.run(self.now + ps)

    def advance_us(self, us: float) -> None:
        self.advance_ps(cm.us(us))

    # -- scheduler registers
    def read(self, reg: str | int) -> int:
        addr = parse_register(reg) if isinstance(reg, str) else reg
        value = self._roundtrip(self.sys.scheduler.host_ctrl, "read", addr)
        if value == ERROR_VALUE and addr not in _valid_addrs(self.sys.cfg.num_pes):
            raise ControlError(f"unmapped register {addr:#x}\n{describe_register_map()}")
        return value

    def write(self, reg: str | int, value: int = 0) -> None:
        addr = parse_register(reg) if isinstance(reg, str) else reg
        status = self._roundtrip(self.sys.scheduler.host_ctrl, "write", addr, value)
        if status == ERROR_VALUE:
            raise ControlError(f"register {addr:#x} is not writable\n{describe_register_map()}")

    # -- processors
    def counters(self, pe: int) -> dict:
        return self._roundtrip(self.sys.processors[pe].read_counters)

    def debug_read(self, pe: int) -> int:
        return self._roundtrip(self.sys.processors[pe].read_debug)

    def debug_write(self, pe: int, value: int) -> None:
        self._roundtrip(self.sys.processors[pe].write_debug, value)

    def interrupt(self, pe: int, bits: int | str) -> None:
        if isinstance(bits, str):
            key = bits.lower()
            bits = IRQ_NAMES[key] if key in IRQ_NAMES else int(bits, 0)
        self._roundtrip(self.sys.processors[pe].interrupt, bits)

    def pause(self, pe: int) -> None:
        self._roundtrip(self.sys.processors[pe].pause)

    def resume(self, pe: int) -> None:
        self._roundtrip(self.sys.processors[pe].resume)

    def dump(self, pe: int, region: str, out_dir: str | Path) -> tuple[Path, Path]:
        """Write the region to ``pe<N>-<region>.bin`` plus a JSON manifest."""
        proc = self.sys.processors[pe]
        if region not in proc.mem.regions:
            raise ControlError(f"unknown region {region!r}; have {sorted(proc.mem.regions)}")
        got = []
        req_at = self.now
        self.sys.ctrl.send("host_request", proc.dump_memory, region,
                           lambda base, data: got.append((self.now, base, data)))
        self.advance_ps(self.lat)
        # The snapshot waits for a packet boundary; keep going until it lands.
        guard = 0
        while not got:
            self.advance_ps(1000 * self.sys.cyc)
            guard += 1
            if guard > 10_000:
                raise ControlError(f"p{pe} never reached a packet boundary")
        t, base, data = got[0]
        self.advance_ps(self.lat + cm.serialization_ps(len(data), self.sys.cfg.fabric.host_gbps))
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        bin_path = out / f"pe{pe}-{region}.bin"
        bin_path.write_bytes(data)
        manifest = {
            "pe": pe, "region": region, "base": base, "size": len(data),
            "requested_ps": req_at, "snapshot_ps": t, "received_ps": self.now,
            "sha256": hashlib.sha256(data).hexdigest(), "file": bin_path.name,
        }
        man_path = out / f"pe{pe}-{region}.json"
        man_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return bin_path, man_path


def _valid_addrs(n: int) -> set[int]:
    out = set()
    for addr, name, _, _ in REGISTER_MAP:
        if name.endswith("+pe"):
            out.update(addr + p for p in range(n))
        else:
            out.add(addr)
    return out
