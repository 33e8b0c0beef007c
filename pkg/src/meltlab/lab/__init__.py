"""Operational shell: seeded streams, checkpoints, config files, CSV output and the CLI."""

from meltlab.lab.rng import RngStream, rng_stream

__all__ = ["RngStream", "rng_stream"]
