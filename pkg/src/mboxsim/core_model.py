"""Time base, clocking, link rates and Ethernet framing arithmetic.

All simulated time is an integer number of picoseconds.  Rates are given in
Gbps, which makes one byte at ``r`` Gbps exactly ``8000 / r`` ps; for the
rates the model uses (100, 32, 128) that is an integer or a half-integer, so
serialization times are exact or rounded up to the next picosecond.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

PS_PER_NS = 1_000
PS_PER_US = 1_000_000
PS_PER_MS = 1_000_000_000
PS_PER_S = 1_000_000_000_000

# Ethernet wire overhead not counted in a payload size: FCS, preamble+SFD, IFG.
FCS_BYTES = 4
PREAMBLE_BYTES = 8
IFG_BYTES = 12
FRAMING_BYTES = FCS_BYTES + PREAMBLE_BYTES + IFG_BYTES

MIN_PACKET = 60
MAX_PACKET = 16384

# Latency model constants: two 100G link crossings, two 32G memory crossings.
LATENCY_INTERCEPT_US = Fraction(765, 1000)
LATENCY_EXTERNAL_GBPS = 100
LATENCY_INTERNAL_GBPS = 32


@dataclass(frozen=True)
class ClockConfig:
    core_clock_hz: int = 250_000_000

    def __post_init__(self):
        if PS_PER_S % self.core_clock_hz:
            raise ValueError(
                f"clock {self.core_clock_hz} Hz does not have an integer ps period"
            )

    @property
    def cycle_ps(self) -> int:
        return PS_PER_S // self.core_clock_hz

    def cycles(self, n: int) -> int:
        """Duration of ``n`` core cycles in ps."""
        return n * self.cycle_ps

    def to_cycles(self, ps: int) -> int:
        return ps // self.cycle_ps


@dataclass(frozen=True)
class RateModel:
    external_link_gbps: int = 100
    external_ports: int = 2
    wide_switch_bits: int = 512
    narrow_switch_bits: int = 128
    clock: ClockConfig = ClockConfig()

    @property
    def wide_gbps(self) -> Fraction:
        return Fraction(self.wide_switch_bits * self.clock.core_clock_hz, 10**9)

    @property
    def narrow_gbps(self) -> Fraction:
        return Fraction(self.narrow_switch_bits * self.clock.core_clock_hz, 10**9)

    @property
    def pe_link_gbps(self) -> Fraction:
        return self.narrow_gbps


def wire_bytes(payload_size: int, framing: int = FRAMING_BYTES) -> int:
    if payload_size < 0:
        raise ValueError("payload size must be non-negative")
    return payload_size + framing


def line_rate_pps(link_gbps: float, payload_size: int,
                  framing: int = FRAMING_BYTES) -> float:
    if link_gbps <= 0:
        raise ValueError("link rate must be positive")
    return link_gbps * 1e9 / (wire_bytes(payload_size, framing) * 8)


def serialization_ns(nbytes: int, rate_gbps) -> Fraction:
    """Exact time to clock ``nbytes`` through a ``rate_gbps`` link, in ns."""
    rate = Fraction(rate_gbps)
    if rate <= 0:
        raise ValueError("rate must be positive")
    return Fraction(nbytes * 8) / rate


@lru_cache(maxsize=1 << 16)
def serialization_ps(nbytes: int, rate_gbps) -> int:
    """Serialization time in integer ps, rounded up (memoized: called per hop)."""
    exact = serialization_ns(nbytes, rate_gbps) * PS_PER_NS
    return -(-exact.numerator // exact.denominator)


def analytic_latency_us(payload_size: int) -> float:
    return float(analytic_latency_exact_us(payload_size))


def analytic_latency_exact_us(payload_size: int) -> Fraction:
    """Analytic store-and-forward latency: 2 hops at 100G, 2 at 32G, plus intercept."""
    if payload_size < 0:
        raise ValueError("payload size must be non-negative")
    per_bit = Fraction(2, LATENCY_EXTERNAL_GBPS) + Fraction(2, LATENCY_INTERNAL_GBPS)
    return Fraction(payload_size * 8) * per_bit / 1000 + LATENCY_INTERCEPT_US


def analytic_latency_ps(payload_size: int) -> int:
    exact = analytic_latency_exact_us(payload_size) * PS_PER_US
    if exact.denominator != 1:
        raise ValueError(f"analytic latency for {payload_size} B is not an integer ps")
    return exact.numerator


def ns(value) -> int:
    """Convert ns (int, float or Fraction) to integer ps."""
    return round(Fraction(value) * PS_PER_NS)


def us(value) -> int:
    return round(Fraction(value) * PS_PER_US)


def ms(value) -> int:
    return round(Fraction(value) * PS_PER_MS)
