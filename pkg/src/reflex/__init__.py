"""Metacognitive multi-robot planning loop with a kinematic desk-scale simulator."""

__version__ = "0.1.0"
