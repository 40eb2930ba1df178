"""Simulation engine: event loop, configuration, traffic, system wiring and metrics."""
