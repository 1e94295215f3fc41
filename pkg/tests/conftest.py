import numpy as np
import pytest

from kpfilter import _engine


@pytest.fixture(scope="session", autouse=True)
def compiled_engine():
    """Compile the numerical kernels once so per-test timings stay honest."""
    _engine.warmup()


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
