"""Lyapunov funnel synthesis for polynomial systems via sums-of-squares programming."""

__version__ = "0.1.0"
