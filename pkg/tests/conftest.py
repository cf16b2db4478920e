"""
Pytest configuration and fixtures
"""

import os

# Keep test runs quiet and deterministic before any settings are cached
os.environ["XVIEW_ENVIRONMENT"] = "ci"
os.environ["XVIEW_LOG_LEVEL"] = "WARNING"

from pathlib import Path
from typing import List

import numpy as np
import pytest

from services.cli.run_config import RunConfig, load_run_config
from services.data.dataset import Sample, load_dataset, write_dataset
from services.engine.rng import Rng
from services.engine.tensor import Tensor
from services.model.generator import Generator, GeneratorConfig
from services.model.layers import init_weights
from services.common.logging_config import run_id_var

TINY_SIZE = 32


def tiny_overrides(**extra) -> dict:
    """Smallest configuration the whole stack accepts (32 x 32, C_L1 = 4)"""
    values = {
        "image_size": TINY_SIZE,
        "c_l1": 4,
        "spatial_hidden_cap": 64,
        "disc_base_channels": 8,
        "disc_layers": 2,
        "batch_size": 2,
        "epochs": 1,
        "checkpoint_every": 1,
    }
    values.update(extra)
    return values


@pytest.fixture(autouse=True)
def _isolate_run_id():
    """Restore the run-id context var that Trainer sets process-wide"""
    token = run_id_var.set(run_id_var.get())
    yield
    run_id_var.reset(token)


@pytest.fixture
def gen() -> np.random.Generator:
    """Seeded numpy generator for test inputs"""
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config() -> RunConfig:
    return load_run_config(extra=tiny_overrides())


@pytest.fixture
def tiny_generator_config() -> GeneratorConfig:
    return GeneratorConfig(image_size=TINY_SIZE, c_l1=4, spatial_hidden_cap=64)


@pytest.fixture
def tiny_generator(tiny_generator_config) -> Generator:
    generator = Generator(tiny_generator_config)
    init_weights(generator, Rng(0))
    return generator


@pytest.fixture
def image_pair(gen):
    """(aerial, semantic) batch of two 32 x 32 inputs in [-1, 1]"""
    shape = (2, 3, TINY_SIZE, TINY_SIZE)
    return (
        Tensor(gen.uniform(-1.0, 1.0, size=shape)),
        Tensor(gen.uniform(-1.0, 1.0, size=shape)),
    )


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory) -> Path:
    """10 synthetic 32 x 32 triplets, 8 train / 2 test"""
    directory = tmp_path_factory.mktemp("tiny_data")
    write_dataset(directory, seed=7, count=10, size=TINY_SIZE)
    return directory


@pytest.fixture(scope="session")
def tiny_train(tiny_dataset_dir) -> List[Sample]:
    return load_dataset(tiny_dataset_dir, "train")


@pytest.fixture(scope="session")
def tiny_test(tiny_dataset_dir) -> List[Sample]:
    return load_dataset(tiny_dataset_dir, "test")


@pytest.fixture
def config_with():
    """Tiny run config with some keys changed"""
    return lambda **extra: load_run_config(extra=tiny_overrides(**extra))
