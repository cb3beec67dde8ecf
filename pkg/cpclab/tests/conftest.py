import numpy as np
import pytest

from ..config import RunConfig
from ..datagen import heterogeneous_separations, inject_symmetric, make_train_test
from ..nnet import init_network
from ..registry import reset_global_registry


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run the slow trend reproductions")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def reset_registry():
    reset_global_registry()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def blobs():
    train, test = make_train_test(30, 10, 4, 6, heterogeneous_separations(4, 3.0, 6.0), seed=7)
    return train, test


@pytest.fixture
def noisy_blobs(blobs):
    train, _ = blobs
    return inject_symmetric(train, 0.4, seed=11)


@pytest.fixture
def small_network():
    return init_network(6, 4, hidden=(12, 10), embedding_dim=5, projector_depth=2, projector_hidden=7, seed=3)


@pytest.fixture
def tiny_config():
    """A run that finishes in seconds: 8 epochs, 2 of them warm-up."""
    return RunConfig.model_validate({
        "seed": 5,
        "dataset": {"num_classes": 3, "dim": 4, "n_per_class": 24, "n_test_per_class": 8},
        "noise": {"rate": 0.3},
        "model": {"hidden": [16], "embedding_dim": 4},
        "optimizer": {"batch_size": 16},
        "trainer": {"epochs": 8, "warmup_epochs": 2, "cpc_warmup": 0.25, "lambda_u_rampup": 2},
    })
