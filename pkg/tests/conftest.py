import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def dft_matrix(n: int) -> np.ndarray:
    """Unitary DFT matrix written out entry by entry."""
    out = np.empty((n, n), dtype=complex)
    for m in range(n):
        for k in range(n):
            out[m, k] = np.exp(-2j * np.pi * m * k / n) / np.sqrt(n)
    return out
