"""Experiment presets: sweeps, CSV schemas and threshold checks.

Each preset file under ``mboxsim/presets`` names an experiment kind, a sweep
description and config overrides on top of ``default.yaml``.  Running a
preset gives an :class:`ExperimentResult`: CSV rows under a versioned schema
plus pass/fail checks (``passed is None`` marks a reported-only number).
"""

from __future__ import annotations

import csv
import io
import json
import logging
import random
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from .. import core_model as cm
from ..accelerators import load_rules, matcher_for
from ..processor import IRQ_POKE
from .config import (ConfigError, SimConfig, apply_overrides, clone, config_from_dict,
                     zero_load_fixed_ps)
from .metrics import latency_summary, order_violations
from .system import System, build_system

log = logging.getLogger(__name__)

ALIASES = {"fig7-latency": "fig7"}

SCHEMAS = {
    "throughput": ("throughput.v1", [
        "schema", "preset", "num_pes", "size", "packets", "offered_pps", "offered_gbps",
        "forwarded_pps", "forwarded_gbps", "fraction_of_offered", "cap_pps", "rx_drops"]),
    "latency": ("latency.v1", [
        "schema", "preset", "load", "size", "packets", "rtt_min_us", "rtt_mean_us",
        "rtt_p99_us", "rtt_max_us", "analytic_us", "rel_error"]),
    "broadcast": ("broadcast.v1", [
        "schema", "preset", "mode", "messages", "latency_min_ns", "latency_mean_ns",
        "latency_max_ns", "fifo_drain_min_ns", "fifo_drain_max_ns", "lossless"]),
    "loopback": ("loopback.v1", [
        "schema", "preset", "size", "packets", "offered_pps", "forwarded_pps",
        "forwarded_gbps", "fraction_of_offered", "rx_drops", "loopback_in", "loopback_out"]),
    "firewall": ("firewall.v1", [
        "schema", "preset", "rules", "packets", "forwarded", "dropped_listed",
        "dropped_non_ipv4", "leaks", "false_drops", "unflipped", "probes",
        "probe_mismatches", "lookup_cycles"]),
    "flows": ("flows.v1", [
        "schema", "preset", "scenario", "escalation", "flows", "packets", "max_displacement",
        "displaced_fraction", "holds", "escalations", "out_of_order", "multi_pe_flows",
        "delivered", "pe_drops", "conserved"]),
    "reconfig": ("reconfig.v1", [
        "schema", "preset", "pe", "reload_ms", "disable_us", "drained_us", "evicted_us",
        "enabled_us", "reload_measured_ms", "offered", "delivered", "drops", "conserved"]),
}


@dataclass
class Check:
    name: str
    passed: bool | None
    detail: str

    def line(self) -> str:
        tag = "REPORT" if self.passed is None else ("PASS" if self.passed else "FAIL")
        return f"[{tag}] {self.name}: {self.detail}"


@dataclass
class ExperimentResult:
    preset: str
    kind: str
    rows: list = field(default_factory=list)
    checks: list = field(default_factory=list)

    @property
    def schema(self) -> str:
        return SCHEMAS[self.kind][0]

    @property
    def columns(self) -> list[str]:
        return SCHEMAS[self.kind][1]

    @property
    def passed(self) -> bool:
        return all(c.passed is not False for c in self.checks)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, self.columns, lineterminator="\n")
        w.writeheader()
        for row in self.rows:
            w.writerow({k: _fmt(row.get(k)) for k in self.columns})
        return buf.getvalue()

    def write(self, out_dir: str | Path) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / f"{self.preset}.csv"
        csv_path.write_text(self.to_csv())
        summary = {
            "preset": self.preset, "schema": self.schema, "passed": self.passed,
            "checks": [{"name": c.name, "passed": c.passed, "detail": c.detail}
                       for c in self.checks],
        }
        sum_path = out / f"{self.preset}.summary.json"
        sum_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        return csv_path, sum_path


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return repr(round(v, 6))
    return v


# ---------------------------------------------------------------- presets

@dataclass
class Preset:
    name: str
    kind: str | None
    description: str
    sweep: dict
    config: SimConfig


def _preset_dir():
    return resources.files("mboxsim") / "presets"


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in _preset_dir().iterdir() if p.name.endswith(".yaml"))


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "per_pe":
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _read_preset_file(path) -> dict:
    data = yaml.safe_load(Path(str(path)).read_text()) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def load_preset(name_or_path: str) -> Preset:
    """A shipped preset by name, or a preset/config YAML file by path."""
    name = ALIASES.get(name_or_path, name_or_path)
    path = Path(name)
    if not (path.suffix in (".yaml", ".yml") and path.exists()):
        if name not in preset_names():
            raise KeyError(f"unknown preset {name_or_path!r}; have {', '.join(preset_names())}")
        path = Path(str(_preset_dir() / f"{name}.yaml"))
    data = _read_preset_file(path)
    base = _read_preset_file(_preset_dir() / "default.yaml")["config"]
    if "config" in data:
        cfg_data = _merge(base, data.get("config") or {})
    else:
        # A bare config file: every key but the preset metadata is config.
        cfg_data = _merge(base, {k: v for k, v in data.items()
                                 if k not in ("experiment", "description", "sweep")})
    cfg = config_from_dict(cfg_data)
    return Preset(path.stem, data.get("experiment"), data.get("description", ""),
                  data.get("sweep") or {}, cfg)


# ---------------------------------------------------------------- points

def _window_rate(system: System) -> tuple[float, int]:
    lo, hi = system.offered_window()
    lo2 = lo + (hi - lo) // 5
    if hi <= lo2:
        return 0.0, 0
    n = system.delivered_between(lo2, hi)
    return n * cm.PS_PER_S / (hi - lo2), n


def throughput_point(cfg: SimConfig, size: int, packets: int) -> dict:
    cfg = clone(cfg)
    t = cfg.traffic
    t.mode, t.size, t.packets, t.duration_us = "full", size, packets, None
    s = build_system(cfg)
    s.run()
    pps, _ = _window_rate(s)
    ports = len(t.ports)
    offered = ports * cm.line_rate_pps(cfg.mac.link_gbps, size, cfg.mac.framing_bytes)
    handler_cycles = int(cfg.handlers.default.params.get("cycles", 16))
    cap = min(offered, cfg.num_pes * cfg.clock_hz / handler_cycles)
    return {
        "num_pes": cfg.num_pes, "size": size, "packets": packets * ports,
        "offered_pps": offered, "offered_gbps": offered * size * 8 / 1e9,
        "forwarded_pps": pps, "forwarded_gbps": pps * size * 8 / 1e9,
        "fraction_of_offered": pps / offered, "cap_pps": cap,
        "rx_drops": s.census().rx_drops,
    }


def latency_point(cfg: SimConfig, size: int, load: str, low_load: float, packets: int) -> dict:
    cfg = clone(cfg)
    t = cfg.traffic
    t.size, t.packets, t.duration_us = size, packets, None
    if load == "low":
        t.mode, t.load, t.rate_pps = "paced", low_load, None
    else:
        t.mode, t.load, t.rate_pps = "full", None, None
    s = build_system(cfg)
    s.run()
    summ = latency_summary(s.latencies)
    analytic = cm.analytic_latency_us(size)
    mean_us = summ["mean_ps"] / 1e6
    return {
        "load": load, "size": size, "packets": summ["count"],
        "rtt_min_us": summ["min_ps"] / 1e6, "rtt_mean_us": mean_us,
        "rtt_p99_us": summ["p99_ps"] / 1e6, "rtt_max_us": summ["max_ps"] / 1e6,
        "analytic_us": analytic, "rel_error": (mean_us - analytic) / analytic,
    }


def broadcast_point(cfg: SimConfig, mode: str, sweep: dict) -> dict:
    cfg = clone(cfg)
    n_pe = cfg.num_pes
    if mode == "paced":
        cfg.handlers.default.params = dict(cfg.handlers.default.params, count=1)
    else:
        cfg.handlers.default.params = dict(cfg.handlers.default.params,
                                           count=int(sweep.get("full_writes_per_pe", 400)))
    s = System(cfg)
    net = s.messaging
    net.keep_messages = True
    if mode == "paced":
        gap = cm.ns(sweep.get("paced_gap_ns", 1000))
        for k in range(int(sweep.get("paced_writes", 64))):
            s.loop.at(k * gap, s.processors[k % n_pe].interrupt, IRQ_POKE)
    else:
        for p in s.processors:
            p.interrupt(IRQ_POKE)
    s.run()
    st = net.stats
    lat = st.latencies
    drains = st.fifo_waits
    if mode == "full":
        # Steady state: drop the first half, where FIFOs are still filling.
        lat = lat[len(lat) // 2:]
        drains = drains[len(drains) // 2:]
    sent_by = [0] * n_pe
    for m in net.messages:
        sent_by[m.src_pe] += 1
    lossless = net.idle() and all(st.delivered[p] == st.sent - sent_by[p] for p in range(n_pe))
    return {
        "mode": mode, "messages": st.sent,
        "latency_min_ns": min(lat) / 1000, "latency_mean_ns": statistics.fmean(lat) / 1000,
        "latency_max_ns": max(lat) / 1000,
        "fifo_drain_min_ns": min(drains) / 1000, "fifo_drain_max_ns": max(drains) / 1000,
        "lossless": lossless,
    }


def loopback_point(cfg: SimConfig, size: int, packets: int) -> dict:
    cfg = clone(cfg)
    t = cfg.traffic
    t.mode, t.size, t.packets, t.duration_us = "full", size, packets, None
    s = build_system(cfg)
    s.run()
    pps, _ = _window_rate(s)
    offered = len(t.ports) * cm.line_rate_pps(cfg.mac.link_gbps, size, cfg.mac.framing_bytes)
    return {
        "size": size, "packets": packets * len(t.ports), "offered_pps": offered,
        "forwarded_pps": pps, "forwarded_gbps": pps * size * 8 / 1e9,
        "fraction_of_offered": pps / offered, "rx_drops": s.census().rx_drops,
        "loopback_in": s.lb_in, "loopback_out": s.lb_out,
    }


class FlatRuleOracle:
    """Reference blacklist: per prefix length, the set of listed networks."""

    def __init__(self, rules):
        self.by_len: dict[int, set[int]] = {}
        for net, plen in rules:
            mask = (0xFFFF_FFFF << (32 - plen)) & 0xFFFF_FFFF
            self.by_len.setdefault(plen, set()).add(net & mask)
        self.masks = [((0xFFFF_FFFF << (32 - p)) & 0xFFFF_FFFF, s)
                      for p, s in sorted(self.by_len.items())]

    def listed(self, ip: int) -> bool:
        for mask, nets in self.masks:
            if ip & mask in nets:
                return True
        return False


def firewall_point(cfg: SimConfig, packets: int, probes: int, rules_path=None) -> dict:
    cfg = clone(cfg)
    if rules_path:
        cfg.handlers.default.params = dict(cfg.handlers.default.params, rules=str(rules_path))
    rules_path = cfg.handlers.default.params.get("rules")
    rules = load_rules(rules_path)
    oracle = FlatRuleOracle(rules)
    t = cfg.traffic
    ports = len(t.ports)
    t.packets, t.duration_us = -(-packets // ports), None
    s = build_system(cfg, traffic=False, rules=rules)
    s.delivered_pkts = []
    s.dropped_pkts = []
    s.attach_traffic()
    s.run()
    leaks = unflipped = forwarded = 0
    for pkt, port, _pe, _t in s.delivered_pkts:
        forwarded += 1
        d = pkt.data
        if d[12:14] == b"\x08\x00" and oracle.listed(int.from_bytes(d[26:30], "big")):
            leaks += 1
        if port != pkt.origin ^ 1:
            unflipped += 1
    false_drops = dropped_listed = dropped_other = 0
    for pkt, _pe, _why in s.dropped_pkts:
        d = pkt.data
        if len(d) >= 34 and d[12:14] == b"\x08\x00":
            if oracle.listed(int.from_bytes(d[26:30], "big")):
                dropped_listed += 1
            else:
                false_drops += 1
        else:
            dropped_other += 1
    # Clean IPv4 frames lost before reaching a processor count as false drops too.
    false_drops += s.census().rx_drops
    matcher = matcher_for(rules_path)
    rng = random.Random(cfg.run.seed)
    mismatches = 0
    for k in range(probes):
        if k % 2:
            ip = rng.getrandbits(32)
        else:
            net, plen = rules[rng.randrange(len(rules))]
            # Near misses: an address inside a listed network with up to two bits flipped.
            ip = (net | rng.getrandbits(32 - plen)) ^ (rng.getrandbits(2) << rng.randrange(31))
        if matcher.match(ip) != oracle.listed(ip):
            mismatches += 1
    lat = set()
    for p in s.processors:
        lat.update(p.handler.accel.latencies)
    return {
        "rules": len(rules), "packets": sum(t_.sent for t_ in s.testers),
        "forwarded": forwarded, "dropped_listed": dropped_listed,
        "dropped_non_ipv4": dropped_other, "leaks": leaks, "false_drops": false_drops,
        "unflipped": unflipped, "probes": probes, "probe_mismatches": mismatches,
        "lookup_cycles": ",".join(str(x) for x in sorted(lat)),
    }


def flows_point(cfg: SimConfig, scenario: dict) -> dict:
    from . import traffic as tr
    cfg = clone(cfg)
    t = cfg.traffic
    t.max_displacement = int(scenario.get("max_displacement", t.max_displacement))
    cfg.flow.escalation = scenario.get("escalation", cfg.flow.escalation)
    s = build_system(cfg, traffic=False)
    s.delivered_pkts = []
    s.attach_traffic()
    s.run()
    pe_of: dict[int, set] = {}
    out = []
    for pkt, _port, pe, _t in s.delivered_pkts:
        info = pkt.info
        pe_of.setdefault(info.flow, set()).add(pe)
        out.append((info.flow, info.index))
    gen = [info for _p, _t, _d, info in _flow_infos(cfg)]
    holds = sum(p.handler.buffer.holds for p in s.processors)
    esc = sum(p.handler.buffer.escalations for p in s.processors)
    c = s.census()
    conserved = (c.offered == c.rx_drops + c.iface_drops + c.queued + c.accepted
                 and c.accepted == c.delivered + c.pe_drops + c.in_fabric + c.in_pes)
    return {
        "scenario": scenario.get("name", ""), "escalation": cfg.flow.escalation,
        "flows": t.flows, "packets": c.offered, "max_displacement": t.max_displacement,
        "displaced_fraction": tr.displaced_fraction(gen), "holds": holds,
        "escalations": esc, "out_of_order": order_violations(out),
        "multi_pe_flows": sum(1 for v in pe_of.values() if len(v) > 1),
        "delivered": c.delivered, "pe_drops": c.pe_drops, "conserved": conserved,
    }


def _flow_infos(cfg):
    from . import traffic as tr
    items = []
    for src in tr.flow_sources(cfg.traffic, cfg.run.seed, cfg.mac.link_gbps,
                               cfg.mac.framing_bytes):
        items.extend((src.port, t, None, info) for t, _d, info in src)
    items.sort(key=lambda r: (r[1], r[0]))
    return items


def reconfig_point(cfg: SimConfig, after_us: float) -> dict:
    cfg = clone(cfg)
    spec = cfg.reconfig[0]
    s = build_system(cfg, traffic=False)
    # Traffic spans the whole sequence: two host transfers, the reload and a margin.
    host_ps = 2 * (cm.serialization_ps(cfg.memory.dmem_bytes, cfg.fabric.host_gbps)
                   + cfg.fabric.host_latency_ps)
    total_us = spec.at_us + spec.reload_ms * 1000 + host_ps / 1e6 + after_us
    t = cfg.traffic
    t.packets, t.duration_us = None, total_us
    s.attach_traffic(t)
    s.run()
    rec = s.reconfigs[0]
    c = s.census()
    conserved = (c.offered == c.rx_drops + c.iface_drops + c.queued + c.accepted
                 and c.accepted == c.delivered + c.pe_drops + c.in_fabric + c.in_pes)

    def at(name):
        v = rec.time_of(name)
        return None if v is None else v / 1e6

    return {
        "pe": spec.pe, "reload_ms": spec.reload_ms, "disable_us": at("disable"),
        "drained_us": at("drained"), "evicted_us": at("evicted"), "enabled_us": at("enabled"),
        "reload_measured_ms": rec.reload_ps / 1e9 if rec.done else None,
        "offered": c.offered, "delivered": c.delivered,
        "drops": c.rx_drops + c.iface_drops + c.pe_drops, "conserved": conserved,
    }


# ---------------------------------------------------------------- runners

def _parallel(fn, arglists, jobs: int):
    if jobs <= 1 or len(arglists) <= 1:
        return [fn(*a) for a in arglists]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        futs = [ex.submit(fn, *a) for a in arglists]
        return [f.result() for f in futs]


def run_experiment(name: str, overrides=(), seed: int | None = None, jobs: int = 1,
                   options: dict | None = None) -> ExperimentResult:
    """Run preset ``name`` with ``key=value`` overrides and CLI options."""
    preset = load_preset(name)
    cfg = preset.config
    if overrides:
        cfg = apply_overrides(cfg, list(overrides))
    if seed is not None:
        cfg.run.seed = seed
    opts = dict(options or {})
    kind = preset.kind
    runner = _RUNNERS.get(kind)
    if runner is None:
        raise KeyError(f"preset {preset.name!r} is a base configuration, not an experiment")
    result = ExperimentResult(preset.name, kind)
    runner(result, cfg, preset.sweep, opts, jobs)
    schema = result.schema
    for row in result.rows:
        row["schema"] = schema
        row["preset"] = preset.name
    return result


def _sizes(sweep, opts):
    return [int(s) for s in (opts.get("sizes") or sweep.get("sizes", [64, 1500]))]


def _run_throughput(res, cfg, sweep, opts, jobs):
    sizes = _sizes(sweep, opts)
    by_size = {int(k): int(v) for k, v in (sweep.get("packets_per_port_by_size") or {}).items()}
    default = int(sweep.get("packets_per_port", 20000))
    forced = opts.get("packets")
    args = [(cfg, s, int(forced) if forced else by_size.get(s, default)) for s in sizes]
    res.rows = _parallel(throughput_point, args, jobs)
    full_cap = cfg.num_pes * cfg.clock_hz / int(cfg.handlers.default.params.get("cycles", 16))
    for row in res.rows:
        size = row["size"]
        pps = row["forwarded_pps"]
        if size in (64, 65):
            err = abs(pps - full_cap) / full_cap
            res.checks.append(Check(
                f"{cfg.num_pes}-pe {size} B rate cap", err <= 0.005,
                f"{pps / 1e6:.3f} Mpps vs {full_cap / 1e6:.0f} Mpps ({err * 100:.3f}% off), "
                f"{row['fraction_of_offered'] * 100:.1f}% of offered, {row['packets']} packets"))
        elif cfg.num_pes >= 16 and size >= 128:
            ok = row["rx_drops"] == 0 and row["fraction_of_offered"] >= 0.999
            res.checks.append(Check(
                f"{cfg.num_pes}-pe {size} B line rate", ok,
                f"{row['forwarded_gbps']:.1f} Gbps, {row['fraction_of_offered'] * 100:.2f}% of "
                f"offered, {row['rx_drops']} drops"))
    if cfg.num_pes < 16:
        full = [r["size"] for r in res.rows if r["fraction_of_offered"] >= 0.999]
        res.checks.append(Check(
            f"{cfg.num_pes}-pe smallest size at full offered load", None,
            f"{min(full) if full else 'none'} B (calibration only)"))


def _run_latency(res, cfg, sweep, opts, jobs):
    load = opts.get("load") or sweep.get("load", "low")
    if load not in ("low", "high"):
        raise ValueError("load must be low or high")
    sizes = _sizes(sweep, opts)
    n = opts.get("packets") or (sweep.get("packets_per_port", 200) if load == "low"
                                else sweep.get("high_packets_per_port", 20000))
    args = [(cfg, s, load, float(sweep.get("low_load", 0.01)), int(n)) for s in sizes]
    res.rows = _parallel(latency_point, args, jobs)
    intercept = zero_load_fixed_ps(cfg) + cfg.mac.rx_fixed_ps + cfg.mac.tx_fixed_ps
    res.checks.append(Check("latency intercept", intercept == cm.analytic_latency_ps(0),
                            f"{intercept} ps fixed round trip (target {cm.analytic_latency_ps(0)} ps)"))
    for row in res.rows:
        if load == "low":
            err = row["rel_error"]
            res.checks.append(Check(
                f"{row['size']} B low-load RTT", abs(err) <= 0.03,
                f"{row['rtt_mean_us']:.4f} us vs analytic {row['analytic_us']:.4f} us "
                f"({err * 100:+.3f}%)"))
        else:
            res.checks.append(Check(f"{row['size']} B high-load RTT", None,
                                    f"mean {row['rtt_mean_us']:.2f} us, max {row['rtt_max_us']:.2f} us"))


def _run_broadcast(res, cfg, sweep, opts, jobs):
    modes = opts.get("modes") or sweep.get("modes", ["paced", "full"])
    res.rows = _parallel(broadcast_point, [(cfg, m, sweep) for m in modes], jobs)
    for row in res.rows:
        if row["mode"] == "paced":
            ok = 72 <= row["latency_min_ns"] and row["latency_max_ns"] <= 92
            res.checks.append(Check("paced broadcast latency", ok,
                                    f"{row['latency_min_ns']:.0f}-{row['latency_max_ns']:.0f} ns "
                                    "(window 72-92 ns)"))
        else:
            m = cfg.messaging
            # A message behind a full FIFO waits one arbitration round per entry.
            expect = (m.pe_fifo_depth + m.pe_boundary_regs) * cfg.num_pes * cfg.cycle_ps / 1000
            ok = row["fifo_drain_min_ns"] == row["fifo_drain_max_ns"] == expect
            res.checks.append(Check("full-rate FIFO drain component", ok,
                                    f"{row['fifo_drain_min_ns']:.0f}-{row['fifo_drain_max_ns']:.0f} ns "
                                    f"(expected exactly {expect:.0f} ns)"))
            ok = 1500 <= row["latency_min_ns"] and row["latency_max_ns"] <= 1700
            res.checks.append(Check("full-rate broadcast latency", ok,
                                    f"{row['latency_min_ns']:.0f}-{row['latency_max_ns']:.0f} ns, "
                                    f"mean {row['latency_mean_ns']:.0f} ns (window 1500-1700 ns)"))
        res.checks.append(Check(f"{row['mode']} broadcast lossless and simultaneous",
                                bool(row["lossless"]), f"{row['messages']} messages"))


def _run_loopback(res, cfg, sweep, opts, jobs):
    sizes = _sizes(sweep, opts)
    n = int(opts.get("packets") or sweep.get("packets", 100000))
    res.rows = _parallel(loopback_point, [(cfg, s, n) for s in sizes], jobs)
    for row in res.rows:
        size = row["size"]
        frac = row["fraction_of_offered"]
        if size >= 128:
            ok = row["rx_drops"] == 0 and frac >= 0.999 and row["loopback_in"] == row["loopback_out"]
            res.checks.append(Check(f"two-step {size} B at line rate", ok,
                                    f"{row['forwarded_gbps']:.1f} Gbps, {frac * 100:.2f}% of "
                                    f"offered, {row['rx_drops']} drops"))
        else:
            res.checks.append(Check(f"two-step {size} B throughput", None,
                                    f"{frac * 100:.1f}% of offered (calibration target ~60-61%)"))


def _run_firewall(res, cfg, sweep, opts, jobs):
    n = int(opts.get("packets") or sweep.get("packets", 1_000_000))
    probes = int(opts.get("probes") or sweep.get("probes", 1_000_000))
    row = firewall_point(cfg, n, probes, opts.get("rules"))
    res.rows = [row]
    res.checks += [
        Check("no listed source forwarded", row["leaks"] == 0, f"{row['leaks']} leaks"),
        Check("no clean IPv4 packet dropped", row["false_drops"] == 0,
              f"{row['false_drops']} false drops"),
        Check("forwarded packets leave on the other port", row["unflipped"] == 0,
              f"{row['unflipped']} of {row['forwarded']} not flipped"),
        Check("matcher equals flat-set reference", row["probe_mismatches"] == 0,
              f"{row['probe_mismatches']} mismatches in {row['probes']} probes"),
        Check("lookup latency", row["lookup_cycles"] == "2",
              f"{row['lookup_cycles']} cycles"),
    ]


def _run_flows(res, cfg, sweep, opts, jobs):
    scen = sweep.get("scenarios") or [{"name": "default"}]
    res.rows = _parallel(flows_point, [(cfg, s) for s in scen], jobs)
    cap = cfg.flow.reorder_capacity
    for row in res.rows:
        res.checks.append(Check(f"{row['scenario']}: flow affinity", row["multi_pe_flows"] == 0,
                                f"{row['multi_pe_flows']} of {row['flows']} flows split"))
        res.checks.append(Check(f"{row['scenario']}: conservation", bool(row["conserved"]),
                                f"{row['delivered']} delivered, {row['pe_drops']} dropped"))
        if row["max_displacement"] <= cap:
            ok = row["out_of_order"] == 0 and row["escalations"] == 0
            res.checks.append(Check(
                f"{row['scenario']}: in-order release", ok,
                f"{row['out_of_order']} out of order, {row['escalations']} escalations, "
                f"{row['holds']} holds, {row['displaced_fraction'] * 100:.2f}% displaced"))
        else:
            res.checks.append(Check(f"{row['scenario']}: escalations counted",
                                    row["escalations"] > 0,
                                    f"{row['escalations']} escalations ({row['escalation']})"))


def _run_reconfig(res, cfg, sweep, opts, jobs):
    if not cfg.reconfig:
        raise ConfigError("reconfig preset needs a reconfig entry")
    row = reconfig_point(cfg, float(opts.get("after_us") or sweep.get("after_us", 200)))
    res.rows = [row]
    expect_ms = cfg.reconfig[0].reload_ms
    res.checks += [
        Check("reconfiguration completed", row["enabled_us"] is not None,
              f"enabled again at {row['enabled_us']} us"),
        Check("reload time", row["reload_measured_ms"] == expect_ms,
              f"{row['reload_measured_ms']} ms (configured {expect_ms} ms)"),
        Check("zero loss", row["drops"] == 0 and row["delivered"] == row["offered"],
              f"{row['offered']} offered, {row['delivered']} delivered, {row['drops']} drops"),
        Check("conservation", bool(row["conserved"]), "census identities"),
    ]


_RUNNERS = {
    "throughput": _run_throughput,
    "latency": _run_latency,
    "broadcast": _run_broadcast,
    "loopback": _run_loopback,
    "firewall": _run_firewall,
    "flows": _run_flows,
    "reconfig": _run_reconfig,
}

EXPERIMENT_PRESETS = ("fig6a", "fig6b", "fig7", "broadcast-latency", "loopback-throughput",
                      "firewall", "flow-reorder", "reconfig")

PLOT_COLUMNS = {
    "throughput": ["size", "forwarded_pps", "offered_pps", "forwarded_gbps", "offered_gbps"],
    "latency": ["size", "rtt_mean_us", "analytic_us"],
    "loopback": ["size", "forwarded_pps", "offered_pps"],
}

__all__ = ["Check", "ExperimentResult", "Preset", "load_preset", "preset_names",
           "run_experiment", "SCHEMAS", "EXPERIMENT_PRESETS"]
