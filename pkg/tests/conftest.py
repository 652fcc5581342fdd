import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ofdmwave.spectral import spectral_operators  # noqa: E402


@pytest.fixture(scope="session")
def ops9():
    return spectral_operators(9)


@pytest.fixture(scope="session")
def ops25():
    return spectral_operators(25)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def crandn(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)
