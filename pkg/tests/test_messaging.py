from __future__ import annotations

import pytest

from mboxsim.fabric import ETH0
from mboxsim.messaging import BroadcastNetwork, bcast_poll
from mboxsim.processor import IRQ_POKE
from mboxsim.sim import traffic as tr
from mboxsim.sim.config import HandlerSpec, SimConfig
from mboxsim.sim.events import EventLoop
from mboxsim.sim.system import System


def net(**irq):
    cfg = SimConfig()
    cfg.messaging.irq_ranges = irq
    loop = EventLoop()
    return loop, BroadcastNetwork(loop, cfg)


def test_single_write_latency_and_fanout():
    loop, n = net()
    done = []
    n.keep_messages = True
    n.write(5, 0x40, 0xCAFEBABE, lambda: done.append(loop.now))
    loop.run()
    # 2-cycle write, one cycle per arbiter stage, 16-cycle distribution.
    assert n.stats.latencies == [76_000]
    assert done == [8_000]
    assert n.stats.delivered[5] == 0
    assert all(n.stats.delivered[p] == 1 for p in range(16) if p != 5)
    for p in range(16):
        assert int.from_bytes(n.regions[p][0x40:0x44], "little") == 0xCAFEBABE
    n.check_lossless()


def test_delivery_is_one_instant_for_all_destinations():
    loop, n = net()
    n.delivery_log = []
    for src in range(16):
        n.try_write(src, 4 * src, src)
    loop.run()
    times = [t for _, _, _, t in n.delivery_log]
    assert len(times) == 16 and len(set(times)) == 16  # one per cycle at the global stage
    assert sorted(times) == times


def test_interrupt_range_pending_addresses():
    loop, n = net(**{"3": [0x100, 0x200]})
    n.try_write(0, 0x100, 7)
    n.try_write(0, 0x300, 8)
    loop.run()
    assert bcast_poll(n, 3) == (0x100, 7)
    assert bcast_poll(n, 3) is None
    # Default range covers the whole region.
    assert n.poll(4) == (0x100, 7)
    assert n.poll(4) == (0x300, 8)


def test_full_fifo_blocks_the_core():
    loop, n = net()
    depth = n.pe_depth
    assert depth == 18
    for k in range(depth):
        assert n.try_write(0, 0, k)
    assert not n.try_write(0, 0, 99)
    released = []
    n.write(0, 0, 100, lambda: released.append(loop.now))
    assert n.stats.blocked_writes == 1
    loop.run()
    assert released and released[0] > 0
    assert n.stats.sent == depth + 1


def test_bad_address():
    _, n = net()
    with pytest.raises(ValueError):
        n.try_write(0, 4094, 1)
    with pytest.raises(ValueError):
        n.try_write(0, 3, 1)


def test_broadcast_from_handlers_in_a_system():
    cfg = SimConfig()
    cfg.handlers.default = HandlerSpec("bcast_writer", {"count": 3})
    s = System(cfg)
    s.messaging.keep_messages = True
    for p in s.processors:
        p.interrupt(IRQ_POKE)
    s.run()
    st = s.messaging.stats
    assert st.sent == 48
    assert all(d == 45 for d in st.delivered)
    s.messaging.check_lossless()


def test_loopback_transfer_between_processors():
    cfg = SimConfig()
    cfg.scheduler.ingress_pes = [0]
    cfg.handlers.per_pe = {0: HandlerSpec("loopback_forwarder", {"targets": [5]})}
    s = System(cfg)
    s.delivered_pkts = []
    for k in range(10):
        s.inject(ETH0, tr.udp_template(256), k * 50_000)
    s.run()
    assert s.lb_in == s.lb_out == 10
    assert {pe for _, _, pe, _ in s.delivered_pkts} == {5}
    assert s.processors[0].counters.loopbacks == 10
    s.census().check()
