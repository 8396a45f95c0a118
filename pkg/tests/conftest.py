import numpy as np
import pytest

import backplane as bp
from backplane.data import DatasetConfig, load_cifar10
from backplane.trainer import TrainConfig, train

from _support import write_synthetic_cifar

DESK_LR = 1e-3
DESK_EPOCHS = 4


@pytest.fixture
def tiny_net():
    net = bp.build_tiny()
    bp.init_weights(net, np.random.default_rng(0))
    return net


@pytest.fixture
def tiny_net64():
    net = bp.build_tiny(dtype=np.float64)
    bp.init_weights(net, np.random.default_rng(0))
    return net


# The session-scoped nets are read-only; tests that mutate weights build
# their own instance.
@pytest.fixture(scope="session")
def vgg7_net():
    net = bp.build_vgg7()
    bp.init_weights(net, np.random.default_rng(0))
    return net


@pytest.fixture(scope="session")
def fixup_net():
    net = bp.build_fixup_resnet20()
    bp.init_weights(net, np.random.default_rng(0), "residual")
    return net


@pytest.fixture(scope="session")
def data_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("corpus")
    write_synthetic_cifar(path, per_file=1200, test_count=600, seed=0)
    return path


@pytest.fixture(scope="session")
def dataset(data_dir):
    return load_cifar10(DatasetConfig(data_dir=str(data_dir), val_count=1000), strict=False)


@pytest.fixture(scope="session")
def desk_run(dataset):
    """One short training run shared by the trainer and acceptance tests."""
    net = bp.build_vgg7()
    bp.init_weights(net, np.random.default_rng(0))
    config = TrainConfig(
        epochs=DESK_EPOCHS, subset=5000, val_subset=600, val_every=1, lr=DESK_LR, seed=0
    )
    return train(net, dataset, config), config
