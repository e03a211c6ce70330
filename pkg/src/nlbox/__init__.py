"""Simulation toolkit for multipartite nonlocal boxes and the Bell expressions they saturate."""

__version__ = "0.1.0"
