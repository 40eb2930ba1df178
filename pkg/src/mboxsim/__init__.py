"""Deterministic discrete-event model of an FPGA middlebox framework."""

from __future__ import annotations

__version__ = "0.1.0"

from . import accelerators, flow_engine  # noqa: F401  (registers handlers)
