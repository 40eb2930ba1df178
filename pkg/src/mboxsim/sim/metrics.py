"""Counters snapshot, latency summaries and CSV export."""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..fabric import ETH0, ETH1, HOST, IFACE_NAMES, LOOPBACK

SNAPSHOT_SCHEMA = "snapshot.v1"
SNAPSHOT_COLUMNS = ["schema", "scope", "index", "metric", "value"]


def percentile(sorted_values, q: float):
    """Nearest-rank percentile of an already sorted sequence."""
    if not sorted_values:
        return None
    k = max(0, min(len(sorted_values) - 1, math.ceil(q / 100 * len(sorted_values)) - 1))
    return sorted_values[k]


def latency_summary(values) -> dict:
    vals = sorted(values)
    if not vals:
        return {"count": 0, "min_ps": None, "mean_ps": None, "p50_ps": None,
                "p99_ps": None, "max_ps": None}
    return {
        "count": len(vals),
        "min_ps": vals[0],
        "mean_ps": sum(vals) / len(vals),
        "p50_ps": percentile(vals, 50),
        "p99_ps": percentile(vals, 99),
        "max_ps": vals[-1],
    }


def latency_histogram(values, bin_ps: int = 10_000) -> list[tuple[int, int]]:
    """(bin start ps, count) pairs, sorted, empty bins omitted."""
    if bin_ps <= 0:
        raise ValueError("bin width must be positive")
    c = Counter(v // bin_ps for v in values)
    return [(b * bin_ps, c[b]) for b in sorted(c)]


def order_violations(records) -> int:
    """Count (flow, index) records that are not exactly the flow's next index."""
    last: dict = {}
    bad = 0
    for flow, index in records:
        prev = last.get(flow)
        if prev is not None and index != prev + 1:
            bad += 1
        last[flow] = index
    return bad


@dataclass
class MetricsSnapshot:
    time_ps: int
    interfaces: list = field(default_factory=list)
    processors: list = field(default_factory=list)
    latency: dict = field(default_factory=dict)
    histogram: list = field(default_factory=list)
    scheduler: dict = field(default_factory=dict)
    messaging: dict = field(default_factory=dict)
    census: dict = field(default_factory=dict)
    events: int = 0

    def rows(self):
        """Long-format rows: (scope, index, metric, value), deterministic order."""
        yield "run", "", "time_ps", self.time_ps
        yield "run", "", "events", self.events
        for rec in self.interfaces:
            for k, v in rec.items():
                if k != "name":
                    yield "iface", rec["name"], k, v
        for rec in self.processors:
            for k, v in rec.items():
                if k != "pe":
                    yield "pe", rec["pe"], k, v
        for k, v in self.latency.items():
            yield "latency", "", k, v
        for start, count in self.histogram:
            yield "latency_hist", start, "count", count
        for k, v in self.scheduler.items():
            if isinstance(v, list):
                for i, x in enumerate(v):
                    yield "scheduler", i, k, x
            else:
                yield "scheduler", "", k, v
        for k, v in self.messaging.items():
            yield "messaging", "", k, v
        for k, v in self.census.items():
            yield "census", "", k, v

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SNAPSHOT_COLUMNS)
        for scope, index, metric, value in self.rows():
            w.writerow([SNAPSHOT_SCHEMA, scope, index, metric, _fmt(value)])
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> Path:
        p = Path(path)
        p.write_text(self.to_csv())
        return p


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(round(v, 6))
    return v


def snapshot(system, hist_bin_ps: int = 10_000) -> MetricsSnapshot:
    """Read every counter of ``system`` at the current simulated time."""
    cyc = system.cyc
    ifaces = []
    for iface in (ETH0, ETH1, HOST, LOOPBACK):
        ing = system.ingress.get(iface)
        tx = system.tx_ports[iface]
        ifaces.append({
            "name": IFACE_NAMES[iface],
            "rx_frames": ing.arrived if ing else 0,
            "rx_bytes": ing.arrived_bytes if ing else 0,
            "rx_drops": (ing.rx_drops + ing.oversize_drops) if ing else 0,
            "rx_stalled_cycles": ing.stalled_cycles(cyc) if ing else 0,
            "tx_frames": tx.frames,
            "tx_bytes": tx.bytes,
            "tx_busy_ps": tx.busy_ps,
        })
    pes = []
    for p in system.processors:
        c = p.counters
        pes.append({
            "pe": p.pe,
            "bytes": c.bytes_in,
            "frames": c.frames_in,
            "drops": c.drops,
            "stalled_cycles": p.stalled_cycles(),
            "frames_out": c.frames_out,
            "bytes_out": c.bytes_out,
            "faults": c.faults,
            "hangs": c.hangs,
            "loopbacks": c.loopbacks,
        })
    st = system.scheduler.stats
    sched = asdict(st)
    ms = system.messaging.stats
    messaging = {
        "sent": ms.sent,
        "blocked_writes": ms.blocked_writes,
        "delivered_total": sum(ms.delivered),
        "max_pe_fifo": ms.max_pe_occupancy,
    }
    if ms.latencies:
        lat = sorted(ms.latencies)
        messaging.update(latency_min_ps=lat[0], latency_max_ps=lat[-1])
    census = asdict(system.census())
    return MetricsSnapshot(
        time_ps=system.loop.now,
        interfaces=ifaces,
        processors=pes,
        latency=latency_summary(system.latencies),
        histogram=latency_histogram(system.latencies, hist_bin_ps),
        scheduler=sched,
        messaging=messaging,
        census=census,
        events=system.loop.processed,
    )
