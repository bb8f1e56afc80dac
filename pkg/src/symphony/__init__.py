"""Deterministic single-network actor-critic learning with hand-written gradients."""

__version__ = "0.1.0"
