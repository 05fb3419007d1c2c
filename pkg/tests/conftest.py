import numpy as np
import pytest

from rankprune import synth


@pytest.fixture(scope="session")
def toy_cfg():
    return synth.toy_config()


@pytest.fixture(scope="session")
def random_model(toy_cfg):
    # session-scoped: tests must treat it as read-only
    return synth.make_random_model(toy_cfg, seed=0, scale=0.05)


@pytest.fixture(scope="session")
def planted_model(toy_cfg):
    return synth.make_planted_model(toy_cfg, seed=0)


def rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)
