"""Traffic sources: synthetic generators, flow synthesis and pcap replay.

A source yields ``(request_time_ps, frame_bytes, info)`` for one tester
port, in non-decreasing request time.  The tester then serializes frames
onto its 100G link, so a request time earlier than the link is free simply
means "back to back".
"""

from __future__ import annotations

import itertools
import logging
import random
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterator

from .. import core_model as cm

log = logging.getLogger(__name__)

ETH_HDR = 14
IPV4_HDR = 20
UDP_HDR = 8
TCP_HDR = 20
TCP_FRAME_OVERHEAD = ETH_HDR + IPV4_HDR + TCP_HDR  # 54

SRC_MAC = bytes.fromhex("02000000aa01")
DST_MAC = bytes.fromhex("02000000bb01")


# ---------------------------------------------------------------- frames

def ipv4_checksum(header: bytes) -> int:
    s = 0
    for (w,) in struct.iter_unpack("!H", header):
        s += w
    while s >> 16:
        s = (s & 0xFFFF) + (s >> 16)
    return ~s & 0xFFFF


def ipv4_frame(size: int, src: int, dst: int, proto: int = 17, sport: int = 1024,
               dport: int = 80, seq: int = 0, ident: int = 0) -> bytes:
    """Ethernet + IPv4 + UDP/TCP frame of exactly ``size`` bytes (no FCS)."""
    l4 = TCP_HDR if proto == 6 else UDP_HDR
    if size < ETH_HDR + IPV4_HDR + l4:
        raise ValueError(f"{size} B is too small for an IPv4 frame with proto {proto}")
    total = size - ETH_HDR
    ip = bytearray(struct.pack("!BBHHHBBHII", 0x45, 0, total, ident & 0xFFFF, 0x4000, 64,
                               proto, 0, src, dst))
    struct.pack_into("!H", ip, 10, ipv4_checksum(bytes(ip)))
    if proto == 6:
        l4b = struct.pack("!HHIIBBHHH", sport, dport, seq & 0xFFFF_FFFF, 0, 5 << 4, 0x18,
                          65535, 0, 0)
    else:
        l4b = struct.pack("!HHHH", sport, dport, total - IPV4_HDR, 0)
    head = DST_MAC + SRC_MAC + b"\x08\x00" + bytes(ip) + l4b
    return head + bytes(size - len(head))


def ipv6_frame(size: int, ident: int = 0) -> bytes:
    head = DST_MAC + SRC_MAC + b"\x86\xdd" + struct.pack("!IHBB", 0x6000_0000, size - 54,
                                                        17, 64)
    head += bytes(16) + bytes(15) + bytes([ident & 0xFF])
    return head + bytes(max(0, size - len(head)))


def nonip_frame(size: int, ethertype: int = 0x0806) -> bytes:
    head = DST_MAC + SRC_MAC + struct.pack("!H", ethertype)
    return head + bytes(size - len(head))


_TEMPLATES: dict[int, bytes] = {}


def udp_template(size: int) -> bytes:
    t = _TEMPLATES.get(size)
    if t is None:
        t = _TEMPLATES[size] = ipv4_frame(size, 0x0A000001, 0x0A000002, 17, 4000, 5000)
    return t


# ---------------------------------------------------------------- timing

def inter_departure_ps(size: int, link_gbps=100, framing: int = cm.FRAMING_BYTES) -> int:
    return cm.serialization_ps(size + framing, link_gbps)


def _times(start_ps: int, count: int | None, gap: Fraction, end_ps: int | None) -> Iterator[int]:
    if not gap:
        if end_ps is not None and start_ps >= end_ps:
            return
        if count is None:
            while True:
                yield start_ps
        yield from itertools.repeat(start_ps, count)
        return
    k = 0
    while count is None or k < count:
        t = start_ps + round(gap * k)
        if end_ps is not None and t >= end_ps:
            return
        yield t
        k += 1


def _gap(spec, size: int, link_gbps, framing: int) -> Fraction:
    if spec.mode == "full":
        return Fraction(0)
    if spec.rate_pps:
        return Fraction(cm.PS_PER_S) / Fraction(spec.rate_pps)
    load = Fraction(spec.load).limit_denominator(10**6)
    wire = cm.serialization_ns(size + framing, link_gbps) * cm.PS_PER_NS
    return wire / load


# ---------------------------------------------------------------- sources

@dataclass
class Source:
    port: int
    items: Iterator

    def __iter__(self):
        return self.items


def build_sources(spec, seed: int, link_gbps=100, framing: int = cm.FRAMING_BYTES,
                  rules=None) -> list[Source]:
    """One source per tester port for ``spec`` (a TrafficSpec)."""
    if spec.mode == "pcap":
        return pcap_sources(spec)
    if spec.mode == "flows":
        return flow_sources(spec, seed, link_gbps, framing)
    start = cm.us(spec.start_us)
    end = None if spec.duration_us is None else start + cm.us(spec.duration_us)
    count = spec.packets
    if count is None and end is None:
        raise ValueError("traffic needs a packet count or a duration")
    gap = _gap(spec, spec.size, link_gbps, framing)
    if gap and gap < inter_departure_ps(spec.size, link_gbps, framing):
        raise ValueError("paced rate exceeds the line rate")
    out = []
    for i, port in enumerate(spec.ports):
        rng = random.Random(f"{seed}:{port}")
        times = _times(start, count, gap, end)
        out.append(Source(port, _payloads(spec, times, rng, port, rules)))
    return out


def _payloads(spec, times, rng: random.Random, port: int, rules):
    size = spec.size
    kind = spec.payload
    if kind == "udp":
        data = udp_template(size)
        for t in times:
            yield t, data, None
    elif kind == "random":
        for t in times:
            proto = 6 if rng.random() < 0.5 else 17
            yield t, ipv4_frame(size, rng.getrandbits(32), rng.getrandbits(32), proto,
                                rng.getrandbits(16), rng.getrandbits(16)), None
    elif kind == "mixed":
        yield from _mixed(spec, times, rng, rules)
    else:
        raise ValueError(f"unknown payload kind {kind!r}")


def _mixed(spec, times, rng: random.Random, rules):
    """Firewall mix: blacklisted, clean IPv4, IPv6, non-IP and runt frames."""
    if rules is None:
        raise ValueError("mixed payloads need the rule list")
    rules = list(rules)
    size = spec.size
    fb, f6, fn, ft = (spec.blacklist_fraction, spec.ipv6_fraction, spec.nonip_fraction,
                      spec.truncated_fraction)
    n = 0
    for t in times:
        n += 1
        u = rng.random()
        if u < ft:
            yield t, nonip_frame(34, 0x0800)[:rng.randrange(14, 34)], "truncated"
        elif u < ft + f6:
            yield t, ipv6_frame(size, n), "ipv6"
        elif u < ft + f6 + fn:
            yield t, nonip_frame(size, rng.choice((0x0806, 0x88CC, 0x8100))), "nonip"
        elif u < ft + f6 + fn + fb and rules:
            net, plen = rules[rng.randrange(len(rules))]
            host = net | (rng.getrandbits(32 - plen) if plen < 32 else 0)
            yield t, ipv4_frame(size, host, 0x0A000002, 17, rng.getrandbits(16), 53,
                                ident=n), "listed"
        else:
            yield t, ipv4_frame(size, rng.getrandbits(32), 0x0A000002,
                                6 if rng.random() < 0.5 else 17, rng.getrandbits(16), 80,
                                ident=n), "random"


# ---------------------------------------------------------------- flow synthesis

@dataclass(frozen=True)
class SegmentInfo:
    flow: int
    index: int
    seq: int
    displaced: bool


def flow_tuple(f: int) -> tuple[int, int, int, int]:
    return (0x0A010000 | (f & 0xFFFF), 0x0A020001, 10000 + (f % 50000), 80)


def reorder_plan(flows: int, segments: int, fraction: float, max_disp: int,
                 rng: random.Random) -> list[list[int]]:
    """Per-flow emission order of segment indices with sparse displacements.

    Events are spaced at least ``max_disp * flows`` packets apart (in the
    round-robin interleaving) so their reordering windows never overlap.
    Each event moves one segment ``d`` places later in its flow, ``d``
    uniform in [1, max_disp].  A flow's first segment is never moved: the
    receiver takes the first segment it sees as the sequence origin.
    """
    orders = [list(range(segments)) for _ in range(flows)]
    total = flows * segments
    if fraction <= 0 or max_disp <= 0:
        return orders
    # Past a few times the trace length the gap never lands inside it anyway.
    mean = min(1.0 / fraction, 4.0 * total + 1)
    lo = max_disp * flows + 1
    if lo >= mean:
        lo = max(1, int(mean * 0.5))
    hi = max(lo, int(round(2 * mean - lo)))
    g = rng.randint(lo, hi)
    moved = [set() for _ in range(flows)]
    while g < total:
        f, i = g % flows, g // flows
        if 0 < i and i + max_disp < segments:
            d = rng.randint(1, max_disp)
            order = orders[f]
            pos = order.index(i)
            order.insert(pos + d, order.pop(pos))
            moved[f].add(i)
        g += rng.randint(lo, hi)
    return orders


def flow_sources(spec, seed: int, link_gbps=100, framing: int = cm.FRAMING_BYTES) -> list[Source]:
    rng = random.Random(f"flows:{seed}")
    F = spec.flows
    plan = reorder_plan(F, spec.segments_per_flow, spec.reorder_fraction,
                        spec.max_displacement, rng)
    isn = [rng.getrandbits(32) for _ in range(F)]
    size = spec.size
    plen = size - TCP_FRAME_OVERHEAD
    if plen <= 0:
        raise ValueError(f"flow segments need more than {TCP_FRAME_OVERHEAD} B")
    start = cm.us(spec.start_us)
    ports = list(spec.ports)
    per_port = {p: [f for f in range(F) if ports[f % len(ports)] == p] for p in ports}
    gap = _gap(spec, size, link_gbps, framing)
    sources = []
    for port, flows in per_port.items():
        sources.append(Source(port, _flow_items(flows, plan, isn, size, plen, start, gap)))
    return sources


def _flow_items(flows, plan, isn, size, plen, start, gap):
    n_seg = len(plan[0]) if plan else 0
    k = 0
    for pos in range(n_seg):
        for f in flows:
            i = plan[f][pos]
            src, dst, sport, dport = flow_tuple(f)
            seq = (isn[f] + i * plen) & 0xFFFF_FFFF
            frame = ipv4_frame(size, src, dst, 6, sport, dport, seq=seq, ident=i)
            yield start + round(gap * k), frame, SegmentInfo(f, i, seq, i != pos)
            k += 1


def displaced_fraction(items) -> float:
    """Share of segments that arrive after a later segment of the same flow."""
    hi: dict[int, int] = {}
    late = total = 0
    for info in items:
        total += 1
        prev = hi.get(info.flow)
        if prev is not None and info.index < prev:
            late += 1
        else:
            hi[info.flow] = info.index
    return late / total if total else 0.0


# ---------------------------------------------------------------- pcap

PCAP_MAGIC_US = 0xA1B2C3D4
PCAP_MAGIC_NS = 0xA1B23C4D
LINKTYPE_ETHERNET = 1


class PcapError(ValueError):
    def __init__(self, path, offset: int, why: str):
        super().__init__(f"{path}: offset {offset}: {why}")
        self.offset = offset


@dataclass(frozen=True)
class PcapRecord:
    ts_ps: int
    data: bytes
    orig_len: int


def read_pcap(path: str | Path) -> tuple[dict, list[PcapRecord]]:
    """Parse a classic pcap file (either byte order, us or ns timestamps)."""
    raw = Path(path).read_bytes()
    if len(raw) < 24:
        raise PcapError(path, 0, f"file header truncated ({len(raw)} of 24 bytes)")
    magic_le = struct.unpack_from("<I", raw, 0)[0]
    for endian in ("<", ">"):
        magic = struct.unpack_from(endian + "I", raw, 0)[0]
        if magic in (PCAP_MAGIC_US, PCAP_MAGIC_NS):
            break
    else:
        raise PcapError(path, 0, f"bad magic {magic_le:#010x}")
    nano = magic == PCAP_MAGIC_NS
    vmaj, vmin, zone, sigfigs, snaplen, linktype = struct.unpack_from(endian + "HHiIII", raw, 4)
    header = {"version": (vmaj, vmin), "snaplen": snaplen, "linktype": linktype,
              "nanosecond": nano, "byte_order": "little" if endian == "<" else "big"}
    frac = 1000 if nano else 1_000_000
    recs = []
    off = 24
    rec_hdr = struct.Struct(endian + "IIII")
    while off < len(raw):
        if off + 16 > len(raw):
            raise PcapError(path, off, "record header truncated")
        sec, sub, incl, orig = rec_hdr.unpack_from(raw, off)
        if sub >= (10**9 if nano else 10**6):
            raise PcapError(path, off, f"sub-second field {sub} out of range")
        if incl > max(snaplen, 0xFFFF) and incl > 262144:
            raise PcapError(path, off, f"record length {incl} exceeds snaplen")
        if off + 16 + incl > len(raw):
            raise PcapError(path, off, f"record body truncated ({len(raw) - off - 16} of {incl} bytes)")
        ts = sec * cm.PS_PER_S + sub * frac
        recs.append(PcapRecord(ts, raw[off + 16:off + 16 + incl], orig))
        off += 16 + incl
    return header, recs


def write_pcap(path: str | Path, records, nanosecond: bool = False,
               snaplen: int = 65535, byte_order: str = "little") -> None:
    """Write (ts_ps, bytes) pairs or PcapRecords as a classic pcap file."""
    e = "<" if byte_order == "little" else ">"
    magic = PCAP_MAGIC_NS if nanosecond else PCAP_MAGIC_US
    unit = 1000 if nanosecond else 1_000_000
    sub_per_s = cm.PS_PER_S // unit
    out = [struct.pack(e + "IHHiIII", magic, 2, 4, 0, 0, snaplen, LINKTYPE_ETHERNET)]
    for rec in records:
        ts, data = (rec.ts_ps, rec.data) if isinstance(rec, PcapRecord) else rec
        sec, rem = divmod(ts, cm.PS_PER_S)
        out.append(struct.pack(e + "IIII", sec, rem // unit, len(data), len(data)))
        out.append(bytes(data))
    Path(path).write_bytes(b"".join(out))


def pcap_sources(spec) -> list[Source]:
    _, recs = read_pcap(spec.pcap)
    if spec.rescale <= 0:
        raise ValueError("rescale must be positive")
    ports = list(spec.ports)
    t0 = recs[0].ts_ps if recs else 0
    start = cm.us(spec.start_us)
    scale = Fraction(spec.rescale).limit_denominator(10**6)
    buckets: dict[int, list] = {p: [] for p in ports}
    limit = spec.packets if spec.packets is not None else len(recs)
    for k, rec in enumerate(recs[:limit]):
        data = rec.data if len(rec.data) >= cm.MIN_PACKET else (
            rec.data + bytes(cm.MIN_PACKET - len(rec.data)))
        t = start + round((rec.ts_ps - t0) / scale)
        buckets[ports[k % len(ports)]].append((t, data, k))
    return [Source(p, iter(items)) for p, items in buckets.items()]


def replay_times(records, rescale: float = 1.0) -> list[int]:
    """Relative replay times of pcap records after dividing gaps by ``rescale``."""
    if not records:
        return []
    t0 = records[0].ts_ps
    scale = Fraction(rescale).limit_denominator(10**6)
    return [round((r.ts_ps - t0) / scale) for r in records]
