"""Benchmark scenarios wiring branches and cycle measurement into a CLI."""
