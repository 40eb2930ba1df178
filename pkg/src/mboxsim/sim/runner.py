"""Top-level entry points: run a configuration, generate or ingest traffic."""

from __future__ import annotations

import logging
from contextlib import contextmanager

from .config import SimConfig, clone
from .metrics import MetricsSnapshot, snapshot
from .reconfig import reconfigure_pe  # noqa: F401  (re-exported)
from .system import System, build_system
from . import traffic as tr

log = logging.getLogger(__name__)


@contextmanager
def _event_log(system: System, path):
    if not path:
        yield
        return
    with open(path, "w") as fh:
        system.loop.log_file = fh
        try:
            yield
        finally:
            system.loop.log_file = None


def run_system(cfg: SimConfig, seed: int | None = None, rules=None) -> System:
    """Build, run to completion (or the horizon) and return the system."""
    cfg = clone(cfg)
    if seed is not None:
        cfg.run.seed = seed
    system = build_system(cfg, rules=rules)
    with _event_log(system, cfg.run.event_log):
        system.run()
    return system


def run(config: SimConfig, seed: int | None = None) -> MetricsSnapshot:
    """Run ``config`` and return its counters; same (config, seed), same snapshot."""
    return snapshot(run_system(config, seed))


def gen_traffic(spec, seed: int, link_gbps=100, framing: int = 24, rules=None) -> list:
    """Materialize the timed stream of ``spec`` as (port, request ps, frame, info) tuples."""
    out = []
    for src in tr.build_sources(spec, seed, link_gbps, framing, rules):
        out.extend((src.port, t, data, info) for t, data, info in src)
    out.sort(key=lambda r: (r[1], r[0]))
    return out


def ingest_pcap(path, rescale: float = 1.0) -> list[tuple[int, bytes]]:
    """(relative time ps, frame) pairs of a pcap file, gaps divided by ``rescale``."""
    _, recs = tr.read_pcap(path)
    times = tr.replay_times(recs, rescale)
    return [(t, r.data) for t, r in zip(times, recs)]
