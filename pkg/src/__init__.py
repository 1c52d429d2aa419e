"""Computational laboratory for weighted and multiplicative Khintchine-type theorems on manifolds."""

__version__ = "0.1.0"
