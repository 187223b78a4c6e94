"""Decomposed hash-grid radiance-field training, access tracing, and a
cycle-approximate model of a banked-SRAM grid accelerator."""

__version__ = "0.1.0"
