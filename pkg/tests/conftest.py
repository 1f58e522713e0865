import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from arlab.data import Dataset, find_mnist, load_mnist_idx, synth_dataset
from arlab.training import TrainConfig, train


@pytest.fixture(scope="session")
def image_corpus():
    """(train, test) 28x28x1 digit data for the desk pipeline.

    Real MNIST IDX files are used when present (ARLAB_MNIST or ./data);
    otherwise the deterministic rendered-digit corpus stands in at the
    same scale.
    """
    paths = find_mnist()
    if paths is not None:
        train_data = load_mnist_idx(*paths["train"], split="train").take(10000)
        test_data = load_mnist_idx(*paths["test"], split="test").take(2000)
        return train_data, test_data, "mnist"
    full = synth_dataset("digits", 12000, seed=7)
    train_data = full.take(10000)
    test_data = Dataset(full.inputs[10000:], full.labels[10000:],
                        name=full.name, split="test", num_classes=10)
    return train_data, test_data, "digits"


def _desk_train(method, image_corpus):
    # lr 0.05 for the compressed 5-epoch desk schedule; the 40-epoch
    # default (lr 0.01, decay at 20) stays the TrainConfig default
    import time
    train_data, test_data, _ = image_corpus
    cfg = TrainConfig(method=method, epochs=5, lr=0.05, lam=2.0, seed=0)
    start = time.time()
    model, report = train(method, train_data, cfg, eval_dataset=test_data)
    return model, report, time.time() - start


@pytest.fixture(scope="session")
def desk_normal(image_corpus):
    return _desk_train("normal", image_corpus)


@pytest.fixture(scope="session")
def desk_entm(image_corpus):
    return _desk_train("entm", image_corpus)


@pytest.fixture(scope="session")
def desk_pat(image_corpus):
    return _desk_train("pat", image_corpus)


@pytest.fixture(scope="session")
def desk_pat_entm(image_corpus):
    return _desk_train("pat_entm", image_corpus)
