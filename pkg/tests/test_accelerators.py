from __future__ import annotations

import random

import pytest

from mboxsim.accelerators import (ACC_FW_MATCH, ACC_SRC_IP, MATCH_CYCLES, BlacklistAccelerator,
                                  BlacklistMatcher, RuleParseError, StreamAccelerator,
                                  load_rules, matcher_for, parse_rules, pseudo_matches,
                                  stream_scan)
from mboxsim.fabric import ETH0, ETH1
from mboxsim.processor import IO_EXT_BASE, MmioFault
from mboxsim.sim import traffic as tr
from mboxsim.sim.config import HandlerSpec, SimConfig
from mboxsim.sim.system import System

from oracles import NetworkListOracle


def ip(s: str) -> int:
    a, b, c, d = (int(x) for x in s.split("."))
    return a << 24 | b << 16 | c << 8 | d


def test_parse_plain_and_snort_lines(tmp_path):
    text = """
    # comment
    10.0.0.1
    192.168.0.0/24, 172.16.5.5/32
    drop ip [1.2.3.4,5.6.0.0/16] any -> $HOME_NET any (msg:"x"; sid:1;)
    """
    rules = parse_rules(text)
    assert rules == [(ip("10.0.0.1"), 32), (ip("192.168.0.0"), 24), (ip("172.16.5.5"), 32),
                     (ip("1.2.3.4"), 32), (ip("5.6.0.0"), 16)]


def test_parse_errors_name_the_line():
    with pytest.raises(RuleParseError) as exc:
        parse_rules("1.2.3.4\nnot-an-ip\n", "bl.rules")
    assert exc.value.lineno == 2 and "bl.rules:2" in str(exc.value)
    with pytest.raises(RuleParseError):
        parse_rules("10.0.0.0/8")  # shorter than the first-stage key
    with pytest.raises(RuleParseError):
        parse_rules("300.1.1.1")


def test_shipped_rules_frozen_shape():
    rules = load_rules()
    assert len(rules) == 1050
    m = matcher_for(None)
    assert m.rule_count == 1050
    assert len(m.stage1) == 384
    assert m.stage2_entries() == 53408


def test_matcher_prefix_and_host_semantics():
    m = BlacklistMatcher.build([(ip("10.1.2.0"), 24), (ip("10.1.3.7"), 32), (ip("10.4.0.0"), 14)])
    assert m.match(ip("10.1.2.200"))
    assert m.match(ip("10.1.3.7"))
    assert not m.match(ip("10.1.3.8"))
    assert m.match(ip("10.7.255.255"))
    assert not m.match(ip("10.8.0.0"))
    assert not m.match(ip("11.1.2.3"))


def test_host_rule_under_listed_24_is_absorbed():
    m = BlacklistMatcher.build([(ip("9.9.9.0"), 24), (ip("9.9.9.9"), 32)])
    assert m.stage2_entries() == 1
    m2 = BlacklistMatcher.build([(ip("9.9.9.9"), 32), (ip("9.9.9.0"), 24)])
    assert m2.expanded() == {(ip("9.9.9.0"), 24)}


def test_matcher_agrees_with_ipaddress_oracle_on_shipped_rules():
    rules = load_rules()
    m = matcher_for(None)
    oracle = NetworkListOracle(rules)
    rng = random.Random(7)
    for k in range(3000):
        if k % 3 == 0:
            x = rng.getrandbits(32)
        else:
            net, plen = rules[rng.randrange(len(rules))]
            x = (net | rng.getrandbits(32 - plen)) ^ (rng.getrandbits(1) << rng.randrange(32))
        assert m.match(x) == oracle.listed(x), hex(x)


def test_lookup_latency_is_two_cycles():
    acc = BlacklistAccelerator(BlacklistMatcher.build([(ip("1.2.3.4"), 32)]))
    acc.mmio_write(0x00, ip("1.2.3.4"), cycle=100)
    assert acc.mmio_read(0x04, 100) == (1, 100 + MATCH_CYCLES)
    acc.mmio_write(0x00, ip("8.8.8.8"), cycle=200)
    assert acc.mmio_read(0x04, 205) == (0, 205)
    assert acc.latencies == {2: 2}


def test_register_access_rules():
    acc = BlacklistAccelerator(BlacklistMatcher())
    with pytest.raises(MmioFault):
        acc.mmio_read(0x00, 0)  # write-only
    with pytest.raises(MmioFault):
        acc.mmio_write(0x04, 1, 0)  # read-only
    assert ACC_SRC_IP == IO_EXT_BASE and ACC_FW_MATCH == IO_EXT_BASE + 4


def _fw_system(rules_text, tmp_path):
    path = tmp_path / "bl.rules"
    path.write_text(rules_text)
    cfg = SimConfig()
    cfg.handlers.default = HandlerSpec("firewall", {"rules": str(path)})
    s = System(cfg)
    s.delivered_pkts = []
    s.dropped_pkts = []
    return s


def test_firewall_handler_end_to_end(tmp_path):
    s = _fw_system("6.6.6.0/24\n7.7.7.7\n", tmp_path)
    frames = [
        (tr.ipv4_frame(128, ip("6.6.6.1"), ip("10.0.0.1")), "drop"),
        (tr.ipv4_frame(128, ip("7.7.7.7"), ip("10.0.0.1")), "drop"),
        (tr.ipv4_frame(128, ip("7.7.7.8"), ip("10.0.0.1")), "pass"),
        (tr.ipv6_frame(128), "drop"),
        (tr.nonip_frame(64), "drop"),
    ]
    for k, (f, _) in enumerate(frames):
        s.inject(ETH0, f, k * 100_000)
    s.run()
    assert len(s.delivered_pkts) == 1
    pkt, port, _pe, _t = s.delivered_pkts[0]
    assert pkt.data == frames[2][0] and port == ETH1
    assert len(s.dropped_pkts) == 4
    handler_stats = {}
    for p in s.processors:
        for k, v in p.handler.stats.items():
            handler_stats[k] = handler_stats.get(k, 0) + v
    assert handler_stats["blacklisted"] == 2 and handler_stats["non_ipv4"] == 2


def test_stream_stub_timing_and_results():
    acc = StreamAccelerator(cycles_per_word=2)
    data = bytes(range(100))
    chunks, done = stream_scan(acc, data, cycle=10)
    assert done == 10 + 13 * 2  # ceil(100 / 8) words
    assert chunks == pseudo_matches(data)
    fresh = StreamAccelerator()
    assert fresh.start(data, 0) == 13
    assert fresh.start(data, 1) is None and fresh.error
    status, _ = fresh.mmio_read(0x08, 1)
    assert status & 0b11 == 0b11


def test_stream_scan_handler_forwards():
    cfg = SimConfig()
    cfg.handlers.default = HandlerSpec("stream_scan", {"cycles_per_word": 1})
    s = System(cfg)
    s.inject(ETH0, tr.udp_template(512), 0)
    s.run()
    assert sum(s.delivered) == 1
    # The scan makes the core wait: 64 words on top of the base cost.
    assert s.latencies[0] > 765_000
