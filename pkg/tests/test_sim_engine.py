from __future__ import annotations

import json
import random
import struct

import pytest

from mboxsim import core_model as cm
from mboxsim.fabric import ETH0
from mboxsim.sim import traffic as tr
from mboxsim.sim.config import (ConfigError, ReconfigSpec, SimConfig, TrafficSpec,
                                apply_overrides, calibrate_mac_fixed, clone, config_from_dict,
                                load_config)
from mboxsim.sim.control import ControlError, HostControl, parse_register, parse_target
from mboxsim.sim.events import EventLoop, InvariantViolation
from mboxsim.sim.experiments import (SCHEMAS, ExperimentResult, load_preset, preset_names)
from mboxsim.sim.metrics import latency_histogram, latency_summary, order_violations, percentile
from mboxsim.sim.runner import gen_traffic, ingest_pcap, reconfigure_pe, run, run_system
from mboxsim.sim.system import System, build_system


# ---------------------------------------------------------------- event loop

def test_equal_time_events_run_in_schedule_order():
    loop = EventLoop()
    seen = []
    for k in range(5):
        loop.at(100, seen.append, k)
    loop.at(50, seen.append, "early")
    loop.run()
    assert seen == ["early", 0, 1, 2, 3, 4]
    assert loop.processed == 6


def test_run_until_stops_and_resumes():
    loop = EventLoop()
    seen = []
    loop.at(10, seen.append, 1)
    loop.at(30, seen.append, 2)
    assert loop.run(20) == 20 and seen == [1]
    loop.run()
    assert seen == [1, 2] and loop.now == 30


def test_scheduling_in_the_past_is_an_error():
    loop = EventLoop()
    loop.at(10, lambda: None)
    loop.run()
    with pytest.raises(InvariantViolation):
        loop.at(5, lambda: None)


def test_violation_carries_recent_events():
    loop = EventLoop(trace=4)

    def boom():
        raise InvariantViolation("bad", loop.now)

    loop.at(1, lambda: None)
    loop.at(2, boom)
    with pytest.raises(InvariantViolation) as exc:
        loop.run()
    assert "recent events" in str(exc.value)


# ---------------------------------------------------------------- config

def test_defaults_calibrate_to_intercept():
    cfg = SimConfig()
    assert calibrate_mac_fixed(cfg) == (cfg.mac.rx_fixed_ps, cfg.mac.tx_fixed_ps)


def test_overrides_parse_yaml_scalars():
    cfg = apply_overrides(SimConfig(), ["traffic.size=256", "scheduler.policy=hash",
                                        "traffic.ports=[0]"])
    assert cfg.traffic.size == 256 and cfg.scheduler.policy == "hash"
    assert cfg.traffic.ports == [0]
    with pytest.raises(ConfigError):
        apply_overrides(SimConfig(), ["nonsense"])
    with pytest.raises(ConfigError):
        apply_overrides(SimConfig(), ["traffic.bogus=1"])


@pytest.mark.parametrize("over", [
    {"num_pes": 6}, {"scheduler": {"policy": "random"}}, {"traffic": {"mode": "full", "ports": [2]}},
    {"traffic": {"mode": "paced", "load": None, "rate_pps": None}},
    {"traffic": {"load": 1.5}}, {"flow": {"reorder_capacity": 99}},
    {"reconfig": [{"pe": 42}]},
])
def test_invalid_configs(over):
    data = SimConfig().to_dict()
    for k, v in over.items():
        if isinstance(v, dict):
            data[k].update(v)
        else:
            data[k] = v
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_round_trip_through_dict_and_file(tmp_path):
    import yaml
    cfg = SimConfig()
    cfg.reconfig = [ReconfigSpec(pe=2, handler={"name": "forwarder", "params": {}})]
    cfg = config_from_dict(cfg.to_dict())
    assert cfg.reconfig[0].handler.name == "forwarder"
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump(cfg.to_dict()))
    assert load_config(p).to_dict() == cfg.to_dict()


def test_every_default_appears_in_default_preset():
    assert load_preset("default").config.to_dict() == SimConfig().to_dict()


def test_presets_load():
    names = preset_names()
    for name in ("fig6a", "fig6b", "fig7", "broadcast-latency", "loopback-throughput",
                 "firewall", "flow-reorder", "reconfig", "default"):
        assert name in names
        load_preset(name)
    assert load_preset("fig7-latency").name == "fig7"
    with pytest.raises(KeyError):
        load_preset("nope")


# ---------------------------------------------------------------- traffic

def test_ipv4_frame_is_well_formed():
    f = tr.ipv4_frame(100, 0x01020304, 0x05060708, 17, 1, 2)
    assert len(f) == 100
    assert f[12:14] == b"\x08\x00"
    assert tr.ipv4_checksum(f[14:34]) == 0
    assert struct.unpack_from("!H", f, 16)[0] == 86
    with pytest.raises(ValueError):
        tr.ipv4_frame(40, 1, 2, 6)


def test_full_and_paced_timing():
    spec = TrafficSpec(mode="full", size=64, packets=3, ports=[0])
    items = gen_traffic(spec, 1)
    assert [t for _, t, _, _ in items] == [0, 0, 0]
    spec = TrafficSpec(mode="paced", size=1476, packets=3, ports=[0], load=0.5)
    times = [t for _, t, _, _ in gen_traffic(spec, 1)]
    gap = 2 * cm.serialization_ps(1500, 100)
    assert times == [0, gap, 2 * gap]
    spec = TrafficSpec(mode="paced", size=64, packets=2, ports=[0], rate_pps=1_000_000)
    assert [t for _, t, _, _ in gen_traffic(spec, 1)] == [0, 1_000_000]


def test_mixed_payload_labels_and_determinism():
    spec = TrafficSpec(mode="full", size=128, packets=400, ports=[0, 1], payload="mixed",
                       truncated_fraction=0.02)
    from mboxsim.accelerators import load_rules
    rules = load_rules()
    a = gen_traffic(spec, 3, rules=rules)
    b = gen_traffic(spec, 3, rules=rules)
    assert a == b
    labels = {info for _, _, _, info in a}
    assert {"listed", "random", "ipv6", "nonip", "truncated"} <= labels


@pytest.mark.parametrize("disp", [1, 4, 8, 16])
def test_reorder_plan_is_a_bounded_permutation(disp):
    rng = random.Random(disp)
    plan = tr.reorder_plan(4, 2000, 0.01, disp, rng)
    for order in plan:
        assert sorted(order) == list(range(2000))
        for pos, idx in enumerate(order):
            assert abs(pos - idx) <= disp


def test_displaced_fraction_near_target():
    spec = TrafficSpec(mode="flows", flows=8, segments_per_flow=4000, reorder_fraction=0.01,
                       max_displacement=8, size=256, load=0.5)
    items = gen_traffic(spec, 11)
    frac = tr.displaced_fraction([info for *_, info in items])
    assert 0.007 < frac < 0.013


def test_pcap_round_trip_both_byte_orders(tmp_path):
    frames = [(k * 1_000_000, tr.udp_template(64 + k)) for k in range(5)]
    for order in ("little", "big"):
        for nano in (False, True):
            p = tmp_path / f"t-{order}-{nano}.pcap"
            tr.write_pcap(p, frames, nanosecond=nano, byte_order=order)
            hdr, recs = tr.read_pcap(p)
            assert hdr["byte_order"] == order and hdr["nanosecond"] == nano
            assert [(r.ts_ps, r.data) for r in recs] == frames
    got = ingest_pcap(tmp_path / "t-little-False.pcap", rescale=2.0)
    assert [t for t, _ in got] == [k * 500_000 for k in range(5)]


def test_pcap_errors_report_offsets(tmp_path):
    p = tmp_path / "bad.pcap"
    p.write_bytes(b"\x00" * 24)
    with pytest.raises(tr.PcapError) as exc:
        tr.read_pcap(p)
    assert exc.value.offset == 0
    tr.write_pcap(p, [(0, tr.udp_template(64))])
    raw = p.read_bytes()
    p.write_bytes(raw[:-10])
    with pytest.raises(tr.PcapError) as exc:
        tr.read_pcap(p)
    assert exc.value.offset == 24


def test_pcap_replay_through_system(tmp_path):
    p = tmp_path / "r.pcap"
    tr.write_pcap(p, [(k * 2_000_000, tr.udp_template(128)) for k in range(10)]
                  + [(30_000_000, tr.udp_template(64)[:42])])  # short frame gets padded
    cfg = SimConfig()
    cfg.traffic = TrafficSpec(mode="pcap", pcap=str(p), ports=[0, 1])
    s = run_system(cfg)
    assert sum(s.delivered) == 11


# ---------------------------------------------------------------- system

def test_census_identities_hold_mid_run():
    cfg = SimConfig()
    cfg.traffic = TrafficSpec(mode="full", size=64, packets=3000)
    s = build_system(cfg)
    s.run(cm.us(10))
    c = s.census()
    c.check()
    assert c.in_flight > 0


def test_census_detects_a_lost_packet():
    cfg = SimConfig()
    cfg.traffic = TrafficSpec(mode="full", size=64, packets=10)
    s = build_system(cfg)
    s.run()
    s.delivered[0] -= 1
    with pytest.raises(InvariantViolation):
        s.census().check()


def test_rx_fifo_overflow_drops_are_counted():
    cfg = SimConfig()
    cfg.num_pes = 8
    cfg.mac.rx_fifo_bytes = 4096
    cfg.traffic = TrafficSpec(mode="full", size=64, packets=5000)
    s = run_system(cfg)
    c = s.census()
    assert c.rx_drops > 0
    assert c.offered == c.rx_drops + c.delivered


def test_reconfigure_under_load_loses_nothing():
    cfg = SimConfig()
    cfg.traffic = TrafficSpec(mode="paced", size=1500, load=0.5, packets=None, duration_us=400)
    s = build_system(cfg)
    rec = reconfigure_pe(s, 3, at_us=20, reload_ms=0.2)
    s.run()
    assert rec.done and rec.reload_ps == 200_000_000
    names = [n for n, _ in rec.steps]
    assert names == ["disable", "drained", "evict_irq", "evicted", "save_start", "saved",
                     "reload_start", "reload_done", "restored", "registered", "enabled"]
    c = s.census()
    assert c.delivered == c.offered and c.pe_drops == 0 and c.rx_drops == 0
    assert rec.drops_after == rec.drops_before == 0
    # The processor takes traffic again afterwards.
    assert s.processors[3].counters.frames_in > 0


def test_snapshot_csv_is_deterministic():
    cfg = SimConfig()
    cfg.traffic = TrafficSpec(mode="full", size=256, packets=500)
    a, b = run(cfg, 5).to_csv(), run(cfg, 5).to_csv()
    assert a == b
    assert a.splitlines()[0] == "schema,scope,index,metric,value"
    assert ",pe,3,stalled_cycles," in a


def test_event_log_written(tmp_path):
    cfg = SimConfig()
    cfg.traffic = TrafficSpec(mode="full", size=64, packets=5)
    cfg.run.event_log = str(tmp_path / "ev.log")
    run_system(cfg)
    lines = (tmp_path / "ev.log").read_text().splitlines()
    assert len(lines) > 10


# ---------------------------------------------------------------- metrics

def test_percentiles_and_histogram():
    vals = list(range(1, 101))
    assert percentile(vals, 50) == 50 and percentile(vals, 99) == 99
    assert percentile([], 50) is None
    s = latency_summary([5, 1, 3])
    assert s["min_ps"] == 1 and s["max_ps"] == 5 and s["mean_ps"] == 3
    assert latency_histogram([1, 2, 15, 25], 10) == [(0, 2), (10, 1), (20, 1)]
    with pytest.raises(ValueError):
        latency_histogram([1], 0)
    assert order_violations([(0, 0), (0, 1), (1, 0), (0, 3), (0, 2)]) == 2


def test_experiment_result_csv_and_summary(tmp_path):
    r = ExperimentResult("fig7", "latency", rows=[{"schema": "latency.v1", "preset": "fig7",
                                                  "load": "low", "size": 64, "rel_error": 0.0}])
    text = r.to_csv()
    assert text.splitlines()[0].split(",") == SCHEMAS["latency"][1]
    csv_path, sum_path = r.write(tmp_path)
    assert json.loads(sum_path.read_text())["schema"] == "latency.v1"


# ---------------------------------------------------------------- host control

def test_host_control_round_trips():
    cfg = SimConfig()
    cfg.traffic = TrafficSpec(mode="paced", size=256, load=0.1, packets=None, duration_us=50)
    s = build_system(cfg)
    ctl = HostControl(s)
    ctl.advance_us(5)
    t0 = ctl.now
    assert ctl.read("CREDITS[3]") <= 16
    assert ctl.now == t0 + 2 * s.ctrl.latency_ps
    ctl.write("DISABLE+3")
    before = s.processors[3].counters.frames_in
    ctl.advance_us(20)
    assert s.processors[3].counters.frames_in == before
    assert ctl.read(0x603) & 1 == 0
    assert set(ctl.counters(3)) == {"bytes", "frames", "drops", "stalled_cycles"}
    with pytest.raises(ControlError) as exc:
        ctl.read("BOGUS")
    assert "CREDITS+pe" in str(exc.value)
    with pytest.raises(ControlError):
        ctl.read(0x7FF)
    with pytest.raises(ControlError):
        ctl.write("ID", 1)


def test_host_control_dump_writes_manifest(tmp_path):
    s = System(SimConfig())
    ctl = HostControl(s)
    s.processors[2].mem.dmem[0:4] = b"\x01\x02\x03\x04"
    bin_path, man_path = ctl.dump(2, "dmem", tmp_path)
    blob = bin_path.read_bytes()
    man = json.loads(man_path.read_text())
    assert blob[:4] == b"\x01\x02\x03\x04"
    assert man["size"] == len(blob) == s.cfg.memory.dmem_bytes
    assert man["base"] == s.cfg.memory.dmem_base
    with pytest.raises(ControlError):
        ctl.dump(2, "nowhere", tmp_path)


def test_register_and_target_parsing():
    assert parse_register("CREDITS[3]") == 0x103
    assert parse_register("credits+3") == 0x103
    assert parse_register("0x600") == 0x600
    assert parse_target("sched", 16) == "sched"
    assert parse_target("p15", 16) == 15
    with pytest.raises(ControlError):
        parse_target("p16", 16)
    with pytest.raises(ControlError):
        parse_register("CREDITS")  # needs a processor index
