import numpy as np
import pytest

from seraser.backend import ToyWorldSpec, build_toy_world
from seraser.config import RunConfig
from seraser.evaluation import GroupedSample


@pytest.fixture(scope="session")
def world():
    """The default planted-shortcut world (K=2, B=2, 400 samples, seed 0)."""
    return build_toy_world()


@pytest.fixture(scope="session")
def small_world():
    return build_toy_world(ToyWorldSpec(num_samples=40, num_reference=6))


@pytest.fixture
def prompt(world):
    return world.model.initial_prompt(world.labels, seed=0)


def as_grouped(samples, with_mask=True):
    return [GroupedSample(s.id, s.image, s.label, s.group, s.mask if with_mask else None) for s in samples]


@pytest.fixture
def run_config():
    return RunConfig()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
