import numpy as np
import pytest

from sgdphases.data import NoisyDataset, RawDataset, corrupt_labels
from sgdphases.mathcore import PrngState
from sgdphases.model import MlpConfig, init_weights


def toy_raw(n=6, d=4, k=3, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.random((n, d))
    labels = np.arange(n) % k
    return RawDataset(images, labels, k)


def blobs(n_per_class=40, d=8, k=3, seed=0, spread=0.08):
    """Well separated clusters in [0, 1]^d; small enough to train in well under a second."""
    rng = np.random.default_rng(seed)
    centers = rng.random((k, d)) * 0.6 + 0.2
    X = np.concatenate([np.clip(c + spread * rng.standard_normal((n_per_class, d)), 0, 1) for c in centers])
    y = np.repeat(np.arange(k), n_per_class)
    order = rng.permutation(len(y))
    return RawDataset(X[order], y[order], k)


@pytest.fixture
def toy():
    return NoisyDataset.clean(toy_raw())


@pytest.fixture
def toy_net():
    cfg = MlpConfig((4, 3, 3), "tanh")
    return init_weights(cfg, PrngState(3, 1))


@pytest.fixture
def blob_data():
    return blobs()


@pytest.fixture
def noisy_blobs():
    return corrupt_labels(blobs(), 0.3, PrngState(1, 7))
