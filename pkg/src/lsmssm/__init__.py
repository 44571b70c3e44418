"""Lyapunov subcenter manifolds and their dissipative continuation into spectral submanifolds."""

__version__ = "0.1.0"
