import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from scipy.optimize import linear_sum_assignment

from deepkoopman import generator as gen
from deepkoopman.lattice import build_lattice

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def multiset_distance(a, b) -> float:
    """Largest pairwise gap after optimal matching of two complex multisets."""
    a, b = np.asarray(a), np.asarray(b)
    assert a.shape == b.shape
    cost = np.abs(a[:, None] - b[None, :])
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].max())


def random_generator(lattice, support_bound=1, seed=0, std=0.3, real_constrained=True, ranks=1):
    support = gen.box_offsets([(-support_bound, support_bound)] * lattice.dims)
    return gen.random_params(lattice, support, np.random.default_rng(seed), std,
                             real_constrained=real_constrained, ranks=ranks)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_lattice():
    return build_lattice(2, [(-2, 2), (-1, 1)])
