import numpy as np
import pytest

from fimaq.zoo import SyntheticDataSpec, ToyViTConfig, gen_dataset, pretrain


@pytest.fixture(scope="session")
def trained():
    """Default-scale toy ViT, 30 epochs, seed 0 (about 15 s on one core)."""
    data = gen_dataset(SyntheticDataSpec(seed=0))
    return pretrain(ToyViTConfig(), data, epochs=30, seed=0), data


@pytest.fixture(scope="session")
def quick():
    """Small, briefly trained model for fast pipeline tests."""
    data = gen_dataset(SyntheticDataSpec(n_train=400, n_val=200, n_calib=32, seed=1))
    return pretrain(ToyViTConfig(), data, epochs=4, seed=1), data


@pytest.fixture
def rng():
    return np.random.default_rng(0)
