import numpy as np
import pytest

from brwsel.laws import binary_pm1, normalized, table


@pytest.fixture(scope="session")
def skewed():
    """Two children, each +1 w.p. 1/4 and -1 otherwise, put in the boundary case."""
    return normalized(binary_pm1(0.25))


@pytest.fixture(scope="session")
def fixture_laws(skewed):
    return {
        "skewed_binary": skewed,
        "two_atoms": normalized(table([([0.5, -1.5], 0.5), ([-0.5, 1.0], 0.5)])),
        "one_or_three": normalized(table([([0.0], 0.5), ([-1.0, 0.4, 1.0], 0.5)])),
    }


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
