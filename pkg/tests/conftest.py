import numpy as np
import pytest

from pdtriallab.numerics import RngStream
from pdtriallab.simulate import SimConfig, simulate_trial


@pytest.fixture(scope="session")
def default_cfg():
    return SimConfig()


@pytest.fixture(scope="session")
def small_trial(default_cfg):
    """400 subjects with plenty of events; shared across read-only tests."""
    return simulate_trial(200, default_cfg, RngStream(20240101))


def random_pd(rng: np.random.Generator, dim: int) -> np.ndarray:
    """Well-conditioned random positive-definite matrix."""
    a = rng.standard_normal((dim, dim))
    return a @ a.T + dim * np.eye(dim)
