"""Simulation configuration: nested dataclasses loadable from YAML/dicts.

Every default here is also written out in the shipped preset files; the
presets are the source users edit, these classes are the schema.
"""

from __future__ import annotations

import copy
import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .. import core_model as cm


class ConfigError(ValueError):
    pass


@dataclass
class SlotGeometry:
    count: int = 16
    size: int = 16384
    base: int = 0x000000
    header_count: int = 16
    header_size: int = 128
    header_base: int = 0x804000


@dataclass
class MemoryLayout:
    packet_mem_bytes: int = 1 << 20
    dmem_base: int = 0x800000
    dmem_bytes: int = 32 << 10
    imem_base: int = 0x1000000
    imem_bytes: int = 64 << 10
    accel_base: int = 0x2000000
    accel_bytes: int = 64 << 10


@dataclass
class MacConfig:
    link_gbps: int = 100
    framing_bytes: int = cm.FRAMING_BYTES
    rx_fifo_bytes: int = 280_000
    # Calibrated so the zero-size round trip of the minimal forwarder is 765 ns.
    rx_fixed_ps: int = 298_580
    tx_fixed_ps: int = 298_580


@dataclass
class FabricConfig:
    wide_bits: int = 512
    narrow_bits: int = 128
    fifo_depth: int = 16
    boundary_regs: int = 2
    wide_stage_cycles: int = 4
    narrow_stage_cycles: int = 4
    egress_stage_cycles: int = 8
    ctrl_cycles: int = 4
    tx_fifo_bytes: int = 65536
    loopback_gbps: int = 100
    loopback_header_bytes: int = 4
    host_gbps: int = 32
    host_latency_ps: int = 1_000_000


@dataclass
class ProcessorConfig:
    dma_setup_cycles: int = 4
    tx_setup_cycles: int = 4
    mmio_cycles: int = 2
    watchdog_cycles: int = 1_000_000


@dataclass
class HandlerSpec:
    name: str = "forwarder"
    params: dict = field(default_factory=dict)


@dataclass
class HandlerConfig:
    default: HandlerSpec = field(default_factory=HandlerSpec)
    per_pe: dict = field(default_factory=dict)

    def for_pe(self, pe: int) -> HandlerSpec:
        spec = self.per_pe.get(pe, self.per_pe.get(str(pe)))
        if spec is None:
            return self.default
        if isinstance(spec, dict):
            return _build(HandlerSpec, spec, f"handlers.per_pe.{pe}")
        return spec


@dataclass
class SchedulerConfig:
    policy: str = "rr"
    decision_cycles: int = 1
    ingress_pes: list | None = None


@dataclass
class MessagingConfig:
    pe_fifo_depth: int = 16
    pe_boundary_regs: int = 2
    cluster_fifo_depth: int = 18
    write_cycles: int = 2
    dist_cycles: int = 16
    region_bytes: int = 4096
    irq_ranges: dict = field(default_factory=dict)


@dataclass
class FlowConfig:
    table_entries: int = 1 << 15
    entry_bytes: int = 16
    timeout_ps: int = cm.PS_PER_MS
    reorder_capacity: int = 8
    escalation: str = "release"


@dataclass
class TrafficSpec:
    mode: str = "full"
    size: int = 1500
    ports: list = field(default_factory=lambda: [0, 1])
    packets: int | None = 1000
    duration_us: float | None = None
    start_us: float = 0.0
    rate_pps: float | None = None
    load: float | None = None
    payload: str = "udp"
    blacklist_fraction: float = 0.25
    ipv6_fraction: float = 0.05
    nonip_fraction: float = 0.02
    truncated_fraction: float = 0.0
    flows: int = 8
    segments_per_flow: int = 2000
    reorder_fraction: float = 0.0
    max_displacement: int = 8
    pcap: str | None = None
    rescale: float = 1.0


@dataclass
class ReconfigSpec:
    pe: int = 0
    at_us: float = 10.0
    reload_ms: float = 756.0
    state_bytes: int | None = None
    handler: HandlerSpec | None = None


@dataclass
class RunConfig:
    seed: int = 1
    horizon_us: float | None = None
    trace_events: int = 0
    event_log: str | None = None
    check_invariants: bool = True


@dataclass
class SimConfig:
    num_pes: int = 16
    clusters: int = 4
    clock_hz: int = 250_000_000
    slots: SlotGeometry = field(default_factory=SlotGeometry)
    memory: MemoryLayout = field(default_factory=MemoryLayout)
    mac: MacConfig = field(default_factory=MacConfig)
    fabric: FabricConfig = field(default_factory=FabricConfig)
    processor: ProcessorConfig = field(default_factory=ProcessorConfig)
    handlers: HandlerConfig = field(default_factory=HandlerConfig)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    messaging: MessagingConfig = field(default_factory=MessagingConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    traffic: TrafficSpec = field(default_factory=TrafficSpec)
    reconfig: list = field(default_factory=list)
    run: RunConfig = field(default_factory=RunConfig)

    @property
    def pes_per_cluster(self) -> int:
        return self.num_pes // self.clusters

    @property
    def clock(self) -> cm.ClockConfig:
        return cm.ClockConfig(self.clock_hz)

    @property
    def cycle_ps(self) -> int:
        return self.clock.cycle_ps

    def wide_gbps(self):
        return _rate(self.fabric.wide_bits * self.clock_hz)

    def narrow_gbps(self):
        return _rate(self.fabric.narrow_bits * self.clock_hz)

    def validate(self) -> "SimConfig":
        if self.clusters <= 0 or self.num_pes % self.clusters:
            raise ConfigError(f"{self.num_pes} processors do not split into {self.clusters} clusters")
        if self.pes_per_cluster not in (2, 4):
            raise ConfigError(f"processors per cluster must be 2 or 4, got {self.pes_per_cluster}")
        if self.slots.count <= 0 or self.slots.size <= 0:
            raise ConfigError("slot geometry must be positive")
        if self.slots.base + self.slots.count * self.slots.size > self.memory.packet_mem_bytes:
            raise ConfigError("packet slots do not fit in packet memory")
        hdr_end = self.slots.header_base + self.slots.header_count * self.slots.header_size
        if not (self.memory.dmem_base <= self.slots.header_base
                and hdr_end <= self.memory.dmem_base + self.memory.dmem_bytes):
            raise ConfigError("header slots must lie inside dmem")
        if self.slots.header_count < self.slots.count:
            raise ConfigError("need one header slot per packet slot")
        if self.scheduler.policy not in ("rr", "hash"):
            raise ConfigError(f"unknown scheduler policy {self.scheduler.policy!r}")
        if self.flow.escalation not in ("release", "drop"):
            raise ConfigError(f"unknown escalation policy {self.flow.escalation!r}")
        if self.flow.reorder_capacity > self.slots.count:
            raise ConfigError("reorder capacity exceeds slot count")
        if self.traffic.mode not in ("full", "paced", "pcap", "flows"):
            raise ConfigError(f"unknown traffic mode {self.traffic.mode!r}")
        for port in self.traffic.ports:
            if port not in (0, 1):
                raise ConfigError(f"traffic port must be 0 or 1, got {port}")
        if self.traffic.mode == "paced" and not (self.traffic.rate_pps or self.traffic.load):
            raise ConfigError("paced traffic needs rate_pps or load")
        if self.traffic.load is not None and not 0 < self.traffic.load <= 1:
            raise ConfigError("traffic load must be in (0, 1]")
        if self.traffic.mode == "pcap" and not self.traffic.pcap:
            raise ConfigError("pcap traffic needs a pcap path")
        ingress = self.scheduler.ingress_pes
        if ingress is not None and any(not 0 <= p < self.num_pes for p in ingress):
            raise ConfigError("ingress_pes out of range")
        for r in self.reconfig:
            if not 0 <= r.pe < self.num_pes:
                raise ConfigError(f"reconfig pe {r.pe} out of range")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _rate(bits_per_s: int):
    # Plain int when exact: cheaper to hash in the serialization cache.
    r = cm.Fraction(bits_per_s, 10**9)
    return r.numerator if r.denominator == 1 else r


def zero_load_fixed_ps(cfg: SimConfig, handler_cycles: int = 16) -> int:
    """Size-independent part of the round trip, excluding the two MAC constants."""
    cyc = (cfg.scheduler.decision_cycles + cfg.fabric.wide_stage_cycles
           + cfg.fabric.narrow_stage_cycles + cfg.processor.dma_setup_cycles
           + handler_cycles + cfg.processor.tx_setup_cycles
           + cfg.fabric.egress_stage_cycles)
    framing = 2 * cm.serialization_ps(cfg.mac.framing_bytes, cfg.mac.link_gbps)
    return cyc * cfg.cycle_ps + framing


def calibrate_mac_fixed(cfg: SimConfig, intercept_ps: int | None = None,
                        handler_cycles: int = 16) -> tuple[int, int]:
    """Split the unexplained part of the zero-size latency between RX and TX MACs."""
    if intercept_ps is None:
        intercept_ps = cm.analytic_latency_ps(0)
    rest = intercept_ps - zero_load_fixed_ps(cfg, handler_cycles)
    if rest < 0:
        raise ConfigError("pipeline constants alone exceed the latency intercept")
    rx = rest // 2
    return rx, rest - rx


# ---------------------------------------------------------------- loading

def _build(cls, data: Any, where: str):
    if dataclasses.is_dataclass(data) and isinstance(data, cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        kwargs[key] = _coerce(hint, value, f"{where}.{key}")
    return cls(**kwargs)


def _coerce(hint, value, where):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if value is None:
        return None
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, where)
    if origin in (typing.Union, types.UnionType):
        for arg in args:
            if dataclasses.is_dataclass(arg):
                return _build(arg, value, where)
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where) if inner else value
    if hint is list or origin is list:
        if where.endswith(".reconfig"):
            return [_build(ReconfigSpec, v, f"{where}[{i}]") for i, v in enumerate(value)]
        return list(value)
    if hint is int and isinstance(value, (int, float, str)) and not isinstance(value, bool):
        try:
            return int(value, 0) if isinstance(value, str) else int(value)
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from None
    if hint is float and isinstance(value, (int, float, str)):
        return float(value)
    if hint is bool:
        if isinstance(value, str):
            return value.lower() in ("1", "true", "yes", "on")
        return bool(value)
    return value


def config_from_dict(data: dict) -> SimConfig:
    data = dict(data or {})
    data.pop("preset", None)
    data.pop("description", None)
    data.pop("experiment", None)
    cfg = _build(SimConfig, data, "config")
    if isinstance(cfg.reconfig, list):
        cfg.reconfig = [r if isinstance(r, ReconfigSpec) else _build(ReconfigSpec, r, "reconfig")
                        for r in cfg.reconfig]
    return cfg.validate()


def load_config(path: str | Path) -> SimConfig:
    with open(path) as fh:
        return config_from_dict(yaml.safe_load(fh) or {})


def apply_overrides(cfg: SimConfig, overrides: list[str] | dict) -> SimConfig:
    """Apply ``a.b.c=value`` overrides (values parsed as YAML scalars)."""
    data = cfg.to_dict()
    items = overrides.items() if isinstance(overrides, dict) else (
        _split_override(o) for o in overrides)
    for key, value in items:
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                node.setdefault(part, {})
            node = node[part]
        node[parts[-1]] = value
    return config_from_dict(data)


def _split_override(text: str):
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def clone(cfg: SimConfig) -> SimConfig:
    return copy.deepcopy(cfg)
