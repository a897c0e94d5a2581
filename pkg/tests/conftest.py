"""Pytest configuration file for setting up test environment."""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add app directory to Python path for imports
app_dir = Path(__file__).parent.parent / 'app'
sys.path.insert(0, str(app_dir))

from sysid.core import DiscreteSystem, simulate_oe  # noqa: E402


@pytest.fixture
def rng():
    """Fixed-seed generator."""
    return np.random.default_rng(12345)


@pytest.fixture
def second_order_system():
    """Stable strictly proper OE system with nb = nf = 2."""
    return DiscreteSystem(num=[0.0, 1.0, 0.5], den=[1.0, -1.2, 0.5])


@pytest.fixture
def noisy_dataset(second_order_system):
    """T = 300 white-input data from the second-order system at SNR 10."""
    generator = np.random.default_rng(7)
    u = generator.standard_normal(300)
    return simulate_oe(second_order_system, u, 10.0, generator)


@pytest.fixture
def small_config_values():
    """A BenchConfig small enough for end-to-end tests."""
    return {
        'runs': 2,
        'T': 60,
        'n': 10,
        'order': 3,
        'samples_N': 40,
        'fb_burn_in': 40,
        'lik_burn_in': 40,
        'bic_order_range': '2..3',
        'master_seed': 42,
    }
