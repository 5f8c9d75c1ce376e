"""Analytical cost model and parallel-strategy planner for transformer and Mamba-2 training."""

__version__ = "0.1.0"
