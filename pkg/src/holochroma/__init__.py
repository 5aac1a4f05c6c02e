"""Colour-managed camera-in-the-loop hologram optimisation, in simulation."""

__version__ = "0.1.0"
