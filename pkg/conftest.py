import numpy as np
import pytest

from model import init_model
from tensor_store import SparseTensor


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run acceptance-scale tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: acceptance-scale run, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def fiber_tensor(order: int = 3, dim: int = 16, seed: int = 0) -> SparseTensor:
    """
    For each mode n, a full fiber along n through the point (n, ..., n).

    The fiber along n fills one fixed-complement bucket of mode n, and the fibers along
    k != n fill fixed-n buckets of mode n, so with M = dim every sampler yields full
    batches for every mode.
    """
    rows = []
    for n in range(order):
        for i in range(dim):
            index = [n] * order
            index[n] = i
            rows.append(index)
    indices = np.unique(np.array(rows, dtype=np.int64), axis=0)
    values = np.random.default_rng(seed).uniform(1.0, 5.0, size=indices.shape[0])
    return SparseTensor(indices, values, (dim,) * order)


@pytest.fixture
def small_tensor():
    rng = np.random.default_rng(7)
    dims = (8, 9, 10)
    ids = np.sort(rng.choice(np.prod(dims), size=120, replace=False))
    indices = np.column_stack(np.unravel_index(ids, dims)).astype(np.int64)
    return SparseTensor(indices, rng.uniform(1.0, 5.0, size=120), dims)


@pytest.fixture
def small_model():
    return init_model((8, 9, 10), (4, 5, 6), 3, seed=3, scale=0.5, dtype=np.float64)


@pytest.fixture
def fibers():
    return fiber_tensor()
