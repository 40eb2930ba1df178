from __future__ import annotations

from fractions import Fraction

import pytest

from mboxsim import core_model as cm

from oracles import analytic_latency_us, line_rate_pps


def test_intercept_is_exact():
    assert cm.analytic_latency_exact_us(0) == Fraction(765, 1000)
    assert cm.analytic_latency_ps(0) == 765_000


@pytest.mark.parametrize("size", [64, 128, 256, 512, 1024, 1500, 2048, 4096, 8192, 9000])
def test_latency_matches_reference_formula(size):
    assert cm.analytic_latency_exact_us(size) == analytic_latency_us(size)
    assert cm.analytic_latency_us(size) == pytest.approx(float(analytic_latency_us(size)))


def test_latency_frozen_points():
    # Frozen from the reference formula.
    assert cm.analytic_latency_ps(64) == 807_240
    assert cm.analytic_latency_ps(1500) == 1_755_000
    assert cm.analytic_latency_ps(9000) == 6_705_000


def test_latency_rejects_negative_size():
    with pytest.raises(ValueError):
        cm.analytic_latency_exact_us(-1)


def test_wire_bytes_adds_framing():
    assert cm.FRAMING_BYTES == 24
    assert cm.wire_bytes(64) == 88
    assert cm.wire_bytes(64, framing=0) == 64


@pytest.mark.parametrize("size", [64, 65, 128, 1500, 9000])
def test_line_rate(size):
    assert cm.line_rate_pps(100, size) == pytest.approx(float(line_rate_pps(100, size)))


def test_small_packet_fraction_of_offered():
    # 16 cores x 250 MHz / 16 cycles = 250 Mpps against two 100G ports.
    cap = 250e6
    assert cap / (2 * cm.line_rate_pps(100, 64)) == pytest.approx(0.88, abs=0.001)
    assert cap / (2 * cm.line_rate_pps(100, 65)) == pytest.approx(0.89, abs=0.001)


def test_serialization_exact_and_rounded_up():
    assert cm.serialization_ns(1500, 32) == 375
    assert cm.serialization_ps(1500, 32) == 375_000
    assert cm.serialization_ps(1, 3) == 2667  # 8/3 ns rounds up
    assert cm.serialization_ps(0, 100) == 0


def test_unit_helpers():
    assert cm.ns(1) == 1000
    assert cm.us(1.5) == 1_500_000
    assert cm.ms(756) == 756 * 10**9


def test_clock():
    clk = cm.ClockConfig(250_000_000)
    assert clk.cycle_ps == 4000
    assert clk.cycles(16) == 64_000
    assert clk.to_cycles(64_000) == 16
