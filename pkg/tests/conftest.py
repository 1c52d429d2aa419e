"""Shared fixtures for the laboratory tests."""

import numpy as np
import pytest

from src.lab.manifold import builtin_chart


@pytest.fixture
def parabola():
    return builtin_chart("parabola")


@pytest.fixture
def veronese3():
    return builtin_chart("veronese3")


@pytest.fixture
def rng():
    """Seeded generator for random instance suites."""
    return np.random.Generator(np.random.Philox(20240601))
