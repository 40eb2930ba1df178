"""Accelerators attached to a processor's MMIO window.

* :class:`BlacklistMatcher` - two-stage source-IP lookup.  Stage 1 keeps the
  distinct leading 9-bit keys of the rules; stage 2 maps each key to the set
  of following 15-bit values, i.e. /24 networks.  Host rules additionally
  compare the last 8 bits in the same second cycle.  A lookup always takes
  two cycles, hit or miss.
* :class:`BlacklistAccelerator` - the matcher behind ``ACC_SRC_IP`` /
  ``ACC_FW_MATCH`` registers, plus the ``firewall`` handler.
* :class:`StreamAccelerator` - a stand-in for a streaming pattern matcher:
  reads the packet in 8-byte words at a configurable cost and emits
  deterministic pseudo-results as 32-bit chunks.
"""

from __future__ import annotations

import ipaddress
import logging
import re
import zlib
from collections import deque
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

from .processor import (IO_EXT_BASE, Handler, MmioFault, register_handler)

log = logging.getLogger(__name__)

MATCH_CYCLES = 2
STAGE1_BITS = 9
STAGE2_BITS = 15
HOST_BITS = 8
MIN_RULE_PREFIX = STAGE1_BITS

DEFAULT_RULES = "emerging-drop.rules"


class RuleParseError(ValueError):
    def __init__(self, source: str, lineno: int, text: str, why: str):
        super().__init__(f"{source}:{lineno}: {why}: {text.strip()!r}")
        self.lineno = lineno


@dataclass(frozen=True)
class Register:
    name: str
    offset: int
    width: int
    access: str  # "r", "w" or "rw"


class RegisterMap:
    def __init__(self, registers):
        self.by_offset: dict[int, Register] = {}
        self.by_name: dict[str, Register] = {}
        for reg in registers:
            if reg.offset in self.by_offset:
                raise ValueError(f"duplicate register offset {reg.offset:#x}")
            if reg.access not in ("r", "w", "rw"):
                raise ValueError(f"bad access {reg.access!r} for {reg.name}")
            self.by_offset[reg.offset] = reg
            self.by_name[reg.name] = reg

    def __contains__(self, offset: int) -> bool:
        return offset in self.by_offset

    def offset(self, name: str) -> int:
        return self.by_name[name].offset

    def check(self, offset: int, access: str) -> Register:
        reg = self.by_offset.get(offset)
        if reg is None or access not in reg.access:
            raise MmioFault(IO_EXT_BASE + offset)
        return reg


# ---------------------------------------------------------------- rules

_IP_TOKEN = re.compile(r"^\d{1,3}(?:\.\d{1,3}){3}(?:/\d{1,2})?$")
_SNORT_ACTIONS = ("alert", "drop", "reject", "pass", "log", "sdrop")


def parse_rules(text: str, source: str = "<rules>") -> list[tuple[int, int]]:
    """Parse blacklist text into (network, prefix_len) pairs.

    Accepts plain address/CIDR lists (one or more per line, separated by
    whitespace or commas) and Snort-style ``drop ip [a,b,c] any -> ...``
    lines, whose source list is used.  ``#`` starts a comment.
    """
    rules = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        words = line.split()
        if words[0].lower() in _SNORT_ACTIONS:
            m = re.search(r"\[([^\]]*)\]", line)
            if m:
                tokens = m.group(1).split(",")
            elif len(words) > 2:
                tokens = [words[2]]
            else:
                raise RuleParseError(source, lineno, raw, "rule has no source address")
        else:
            tokens = re.split(r"[\s,;]+", line)
        for tok in tokens:
            tok = tok.strip()
            if not tok:
                continue
            if not _IP_TOKEN.match(tok):
                raise RuleParseError(source, lineno, raw, f"not an IPv4 address or prefix ({tok})")
            try:
                net = ipaddress.IPv4Network(tok, strict=False)
            except ValueError as exc:
                raise RuleParseError(source, lineno, raw, str(exc)) from None
            if net.prefixlen < MIN_RULE_PREFIX:
                raise RuleParseError(source, lineno, raw,
                                     f"prefix /{net.prefixlen} shorter than /{MIN_RULE_PREFIX}")
            rules.append((int(net.network_address), net.prefixlen))
    return rules


def default_rules_path() -> Path:
    return Path(str(resources.files("mboxsim") / "data" / DEFAULT_RULES))


def load_rules(path: str | Path | None = None) -> list[tuple[int, int]]:
    p = default_rules_path() if path is None else Path(path)
    return parse_rules(p.read_text(), str(p))


# ---------------------------------------------------------------- matcher

class BlacklistMatcher:
    """Two-stage lookup table; ``match`` is the functional part of a lookup."""

    def __init__(self):
        self.stage1: set[int] = set()
        # key9 -> {mid15: None for a whole /24, or a set of host bytes}
        self.stage2: dict[int, dict[int, set | None]] = {}
        self.rule_count = 0

    @classmethod
    def build(cls, rules) -> "BlacklistMatcher":
        m = cls()
        for rule in rules:
            if isinstance(rule, str):
                parsed = parse_rules(rule)
                if len(parsed) != 1:
                    raise ValueError(f"expected one rule in {rule!r}")
                rule = parsed[0]
            m.add(*rule)
        return m

    def add(self, network: int, prefix: int) -> None:
        if not MIN_RULE_PREFIX <= prefix <= 32:
            raise ValueError(f"prefix /{prefix} not supported")
        self.rule_count += 1
        if prefix <= 24:
            first = network >> 8
            for k in range(1 << (24 - prefix)):
                self._add24(first + k)
        else:
            for k in range(1 << (32 - prefix)):
                self._add_host(network + k)

    def _add24(self, net24: int) -> None:
        key, mid = net24 >> STAGE2_BITS, net24 & 0x7FFF
        self.stage1.add(key)
        self.stage2.setdefault(key, {})[mid] = None

    def _add_host(self, ip: int) -> None:
        key, mid = ip >> 23, (ip >> 8) & 0x7FFF
        self.stage1.add(key)
        bucket = self.stage2.setdefault(key, {})
        if mid in bucket and bucket[mid] is None:
            return
        bucket.setdefault(mid, set()).add(ip & 0xFF)

    def match(self, ip: int) -> bool:
        bucket = self.stage2.get(ip >> 23)
        if bucket is None:
            return False
        mid = (ip >> 8) & 0x7FFF
        if mid not in bucket:
            return False
        hosts = bucket[mid]
        return hosts is None or (ip & 0xFF) in hosts

    def stage2_entries(self) -> int:
        return sum(len(b) for b in self.stage2.values())

    def expanded(self) -> set[tuple[int, int]]:
        """Flat (network, prefix) set equivalent to this table (/24s and /32s)."""
        out = set()
        for key, bucket in self.stage2.items():
            for mid, hosts in bucket.items():
                base = (key << 23) | (mid << 8)
                if hosts is None:
                    out.add((base, 24))
                else:
                    out.update((base | h, 32) for h in hosts)
        return out


@lru_cache(maxsize=8)
def _cached_matcher(path: str, mtime: float) -> BlacklistMatcher:
    return BlacklistMatcher.build(load_rules(path))


def matcher_for(path: str | Path | None = None) -> BlacklistMatcher:
    p = default_rules_path() if path is None else Path(path)
    return _cached_matcher(str(p.resolve()), p.stat().st_mtime)


class BlacklistAccelerator:
    """MMIO face of the matcher: write ACC_SRC_IP, read ACC_FW_MATCH."""

    REGS = RegisterMap([
        Register("ACC_SRC_IP", 0x00, 32, "w"),
        Register("ACC_FW_MATCH", 0x04, 8, "r"),
    ])

    def __init__(self, matcher: BlacklistMatcher):
        self.matcher = matcher
        self.flag = 0
        self.ready_cycle = 0
        self.lookups = 0
        self.hits = 0
        self.last_write_cycle = None
        self.latencies: dict[int, int] = {}

    def has_register(self, offset: int) -> bool:
        return offset in self.REGS

    def mmio_write(self, offset: int, value: int, cycle: int) -> None:
        self.REGS.check(offset, "w")
        self.lookups += 1
        self.flag = 1 if self.matcher.match(value & 0xFFFF_FFFF) else 0
        self.hits += self.flag
        self.last_write_cycle = cycle
        self.ready_cycle = cycle + MATCH_CYCLES
        lat = self.ready_cycle - cycle
        self.latencies[lat] = self.latencies.get(lat, 0) + 1

    def mmio_read(self, offset: int, cycle: int) -> tuple[int, int]:
        self.REGS.check(offset, "r")
        return self.flag, max(cycle, self.ready_cycle)


ACC_SRC_IP = IO_EXT_BASE + BlacklistAccelerator.REGS.offset("ACC_SRC_IP")
ACC_FW_MATCH = IO_EXT_BASE + BlacklistAccelerator.REGS.offset("ACC_FW_MATCH")


@register_handler("firewall")
class FirewallHandler(Handler):
    """Drop non-IPv4 frames and blacklisted sources; bounce the rest to the other port."""

    def __init__(self, proc, params):
        super().__init__(proc, params)
        self.cycles = int(params.get("cycles", 16))
        rules = params.get("rules")
        self.matcher = matcher_for(rules)
        self.accel = BlacklistAccelerator(self.matcher)
        proc.attach_device(0, self.accel)
        self.stats = {"forwarded": 0, "blacklisted": 0, "non_ipv4": 0, "truncated": 0}

    def on_packet(self, ctx, desc):
        ctx.charge(self.cycles)
        pkt = desc.pkt
        skip = 4 if pkt is not None and pkt.meta is not None else 0
        if desc.len - skip < 34:
            self.stats["truncated"] += 1
            ctx.drop(desc)
            return
        hdr = ctx.header(desc, skip + 34)
        if hdr[skip + 12] != 0x08 or hdr[skip + 13] != 0x00:
            self.stats["non_ipv4"] += 1
            ctx.drop(desc)
            return
        src = int.from_bytes(hdr[skip + 26:skip + 30], "big")
        ctx.mmio_write(ACC_SRC_IP, src)
        if ctx.mmio_read(ACC_FW_MATCH):
            self.stats["blacklisted"] += 1
            ctx.drop(desc)
            return
        self.stats["forwarded"] += 1
        desc.port ^= 1
        ctx.send(desc, desc.port)


# ---------------------------------------------------------------- stream stub

class StreamAccelerator:
    """Streaming scanner stub: busy ceil(len/word) x cycles_per_word cycles.

    Registers: STREAM_OFFSET (w), STREAM_LEN (w, starts the scan),
    STREAM_STATUS (r: bit0 busy, bit1 error, bit2 results pending),
    STREAM_RESULT (r: pops one 32-bit result chunk, 0 when empty).
    """

    REGS = RegisterMap([
        Register("STREAM_OFFSET", 0x00, 32, "w"),
        Register("STREAM_LEN", 0x04, 32, "w"),
        Register("STREAM_STATUS", 0x08, 8, "r"),
        Register("STREAM_RESULT", 0x0C, 32, "r"),
    ])
    WORD_BYTES = 8

    def __init__(self, cycles_per_word: int = 1, max_results: int = 4, memory=None, ports=None):
        if cycles_per_word <= 0:
            raise ValueError("cycles_per_word must be positive")
        self.cycles_per_word = cycles_per_word
        self.max_results = max_results
        self.memory = memory
        self.ports = ports
        self.busy_until = 0
        self.error = False
        self.offset = 0
        self.results: deque[int] = deque()
        self._pending: list[int] = []
        self.scans = 0

    def busy(self, cycle: int) -> bool:
        return cycle < self.busy_until

    def start(self, data: bytes, cycle: int) -> int | None:
        """Begin scanning ``data``; returns the completion cycle or None if busy."""
        if self.busy(cycle):
            self.error = True
            return None
        self.error = False
        words = -(-len(data) // self.WORD_BYTES)
        self.busy_until = cycle + words * self.cycles_per_word
        self._pending = pseudo_matches(data, self.max_results)
        if not data:
            self.results.extend(self._pending)
            self._pending = []
        if self.ports is not None:
            self.ports.accel_access("packet_mem", cycle, words)
        self.scans += 1
        return self.busy_until

    def _settle(self, cycle: int) -> None:
        if self._pending and cycle >= self.busy_until:
            self.results.extend(self._pending)
            self._pending = []

    def has_register(self, offset: int) -> bool:
        return offset in self.REGS

    def mmio_write(self, offset: int, value: int, cycle: int) -> None:
        reg = self.REGS.check(offset, "w")
        if reg.name == "STREAM_OFFSET":
            self.offset = value
            return
        data = b""
        if self.memory is not None and value:
            data = bytes(self.memory.packet_mem[self.offset:self.offset + value])
        self.start(data, cycle)

    def mmio_read(self, offset: int, cycle: int) -> tuple[int, int]:
        reg = self.REGS.check(offset, "r")
        self._settle(cycle)
        if reg.name == "STREAM_STATUS":
            status = (1 if self.busy(cycle) else 0) | (2 if self.error else 0)
            status |= 4 if self.results else 0
            return status, cycle
        # Reading a result blocks until the scan is over.
        ready = max(cycle, self.busy_until)
        self._settle(ready)
        return (self.results.popleft() if self.results else 0), ready


def pseudo_matches(data: bytes, max_results: int = 4) -> list[int]:
    """Deterministic stand-in for rule-match output: 0..max_results chunks."""
    if not data:
        return []
    h = zlib.crc32(data)
    count = h % (max_results + 1)
    out = []
    for _ in range(count):
        h = zlib.crc32(h.to_bytes(4, "little"), h)
        out.append(h)
    return out


def stream_scan(accel: StreamAccelerator, data: bytes, cycle: int = 0) -> tuple[list[int], int]:
    """Run one scan to completion: (result chunks, completion cycle)."""
    done = accel.start(data, cycle)
    if done is None:
        raise RuntimeError("stream accelerator busy")
    accel._settle(done)
    chunks = list(accel.results)
    accel.results.clear()
    return chunks, done


@register_handler("stream_scan")
class StreamScanHandler(Handler):
    """Scan every payload with the stream stub, then forward it."""

    def __init__(self, proc, params):
        super().__init__(proc, params)
        self.cycles = int(params.get("cycles", 16))
        self.accel = StreamAccelerator(int(params.get("cycles_per_word", 1)),
                                       int(params.get("max_results", 4)),
                                       memory=proc.mem, ports=proc.ports)
        proc.attach_device(0x100, self.accel)
        self.results = 0

    def on_packet(self, ctx, desc):
        ctx.charge(self.cycles)
        base = IO_EXT_BASE + 0x100
        ctx.mmio_write(base + 0x00, desc.data)
        ctx.mmio_write(base + 0x04, desc.len)
        while True:
            chunk = ctx.mmio_read(base + 0x0C)
            if not chunk:
                break
            self.results += 1
        ctx.send(desc, desc.port if desc.port in (0, 1) else desc.pkt.origin)
