"""Nested-dissection direct solvers for 2D elliptic problems with HBS-compressed
Dirichlet-to-Neumann maps."""

__version__ = "0.1.0"
