from __future__ import annotations

import pytest

from mboxsim.fabric import ETH0
from mboxsim.flow_engine import (COLLISION_EVICT, IN_ORDER, NEW_FLOW, OUT_OF_ORDER, FlowTable,
                                 ReorderBuffer, flow_index, flow_timeout, flow_update,
                                 fold_index, parse_tcp, seq_after)
from mboxsim.sim import traffic as tr
from mboxsim.sim.config import HandlerSpec, SimConfig
from mboxsim.sim.system import System

from oracles import in_order


def test_flow_index_split():
    assert flow_index(0xFFFFFFFF) == ((1 << 18) - 1, (1 << 14) - 1)
    assert flow_index(0x0004_0001) == (1, 1)


def test_fold_index():
    assert fold_index(5, 1 << 18) == 5
    assert fold_index((1 << 15) | 3, 1 << 15) == 2
    assert fold_index(12345, 1) == 0
    with pytest.raises(ValueError):
        fold_index(1, 3)


def test_seq_after_wraps():
    assert seq_after(1, 0)
    assert seq_after(5, 0xFFFFFFF0)
    assert not seq_after(0xFFFFFFF0, 5)
    assert not seq_after(7, 7)


def test_table_verdicts():
    t = FlowTable(1 << 15, timeout_ps=1000)
    h = 0x1234_5678
    assert flow_update(t, h, 100, 10, 0) == (NEW_FLOW, None)
    assert flow_update(t, h, 110, 10, 1) == (IN_ORDER, None)
    assert flow_update(t, h, 130, 10, 2) == (OUT_OF_ORDER, 120)
    other = h ^ (1 << 31)  # same index bits, different tag
    assert t.slot_for(other) == t.slot_for(h)
    assert t.update(other, 0, 10, 3).kind == COLLISION_EVICT
    assert t.lookup(h) is None
    assert flow_timeout(t, 5000) == 1
    assert t.state_bytes == (1 << 15) * 16


def test_expired_entry_restarts_as_new_flow():
    t = FlowTable(16, timeout_ps=100)
    t.update(7, 0, 10, 0)
    assert t.update(7, 500, 10, 1000).kind == NEW_FLOW
    assert t.stats["timeouts"] == 1


def test_reorder_buffer_release_and_give_up():
    t = FlowTable(16)
    b = ReorderBuffer(capacity=3)
    h = 9
    t.update(h, 0, 10, 0)
    assert b.hold(h, 20, 10, "c", 1)
    assert b.hold(h, 30, 10, "d", 2)
    assert b.hold(h, 50, 10, "f", 3)
    assert not b.hold(h, 60, 10, "g", 4)
    t.update(h, 10, 10, 5)  # the missing segment
    assert b.release_ready(h, t, 5) == ["c", "d"]
    assert b.count == 1
    assert b.oldest_flow() == h
    assert b.give_up(h, t, 6) == ["f"]
    assert t.lookup(h).expected == 60 and b.count == 0


def test_parse_tcp():
    f = tr.ipv4_frame(200, 1, 2, 6, 1000, 80, seq=0xDEADBEEF)
    assert parse_tcp(f) == (0xDEADBEEF, 200 - 54, 54)
    assert parse_tcp(bytes(4) + f, 4) == (0xDEADBEEF, 146, 54)
    assert parse_tcp(tr.udp_template(200)) is None
    assert parse_tcp(f[:40]) is None


def _flow_system(capacity=8, escalation="release"):
    cfg = SimConfig()
    cfg.scheduler.policy = "hash"
    cfg.flow.reorder_capacity = capacity
    cfg.flow.escalation = escalation
    cfg.handlers.default = HandlerSpec("flow_reorder", {})
    s = System(cfg)
    s.delivered_pkts = []
    return s


def _segments(order, size=256, sport=1111, isn=1000):
    plen = size - 54
    return [(i, tr.ipv4_frame(size, 0x0A000001, 0x0A000002, 6, sport, 80, seq=isn + i * plen))
            for i in order]


def test_handler_restores_order_within_capacity():
    s = _flow_system()
    order = [0, 1, 2, 5, 3, 4, 6, 9, 7, 8, 10]
    for k, (i, f) in enumerate(_segments(order)):
        s.inject(ETH0, f, k * 200_000, info=i)
    s.run()
    out = [pkt.info for pkt, _, _, _ in s.delivered_pkts]
    assert in_order([(0, i) for i in out])
    assert len({pe for _, _, pe, _ in s.delivered_pkts}) == 1
    assert sum(p.handler.buffer.escalations for p in s.processors) == 0


def test_handler_escalates_past_capacity():
    s = _flow_system(capacity=2)
    order = [0, 2, 3, 4, 1, 5]  # 2 and 3 fill the buffer, 4 overflows it
    for k, (i, f) in enumerate(_segments(order)):
        s.inject(ETH0, f, k * 200_000, info=i)
    s.run()
    esc = sum(p.handler.buffer.escalations for p in s.processors)
    assert esc >= 1
    c = s.census()
    assert c.delivered + c.pe_drops == 6
    c.check()


def test_drop_escalation_discards():
    s = _flow_system(capacity=1, escalation="drop")
    for k, (i, f) in enumerate(_segments([0, 2, 3, 1])):
        s.inject(ETH0, f, k * 200_000, info=i)
    s.run()
    assert s.pe_drops.get("handler", 0) >= 1
    s.census().check()
