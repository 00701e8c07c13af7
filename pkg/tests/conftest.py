from __future__ import annotations

import functools
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from circuitquant.graph import ModelConfig
from circuitquant.planted import default_config, generate_planted
from circuitquant.weights import random_weights


@pytest.fixture(scope="session")
def small_cfg() -> ModelConfig:
    return ModelConfig.make(2, 2, 8, 11, 4)


@pytest.fixture(scope="session")
def mlp_cfg() -> ModelConfig:
    return ModelConfig.make(2, 2, 8, 11, 4, d_mlp=16)


@pytest.fixture(scope="session")
def small_weights(small_cfg):
    return random_weights(small_cfg, seed=0)


@pytest.fixture(scope="session")
def mlp_weights(mlp_cfg):
    return random_weights(mlp_cfg, seed=1)


@pytest.fixture(scope="session")
def tokens() -> np.ndarray:
    return np.random.default_rng(5).integers(0, 11, size=(3, 4))


@functools.lru_cache(maxsize=None)
def planted(seed: int = 0, layers: int = 2, heads: int = 4, **kw):
    return generate_planted(default_config(layers, heads), seed, **kw)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
