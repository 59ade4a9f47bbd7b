import os

import numpy as np
import pytest

from denoiser import DenoiserConfig


@pytest.fixture(autouse=True)
def clean_warpcond_env(monkeypatch):
    for name in list(os.environ):
        if name.startswith("WARPCOND_"):
            monkeypatch.delenv(name, raising=False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return DenoiserConfig(base_channels=8, num_heads=2)
