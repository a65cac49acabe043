"""Adaptive population-graph learning for node-level prediction."""

__version__ = "0.1.0"
