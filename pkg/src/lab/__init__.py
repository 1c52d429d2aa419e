"""Numerical modules: approximation functions, charts, lattices, flows, counting."""
