"""Shared fixtures for the test suite."""

import numpy as np
import pytest

from src.datagen import GeneratorSpec, generate
from src.training import Ablation, ModelDims, TrainConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_dims():
    return ModelDims(num_filters=4, d_k=4, d_g=4, d_u=4, d_z=3, d_h=5)


@pytest.fixture
def tiny_config(tiny_dims):
    return TrainConfig(
        epochs=2,
        batch_size=4,
        substeps=2,
        kernel_size=3,
        dims=tiny_dims,
        ablation=Ablation(),
    )


@pytest.fixture
def toy_spec():
    return GeneratorSpec(num_rois=3, num_samples=6, duration=8.0, seed=7)


@pytest.fixture
def toy_dataset(toy_spec):
    return generate(toy_spec)
