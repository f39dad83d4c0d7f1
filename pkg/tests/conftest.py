from pathlib import Path

import numpy as np
import pytest

from clover import data, synth
from clover.model import Architecture, ModelParams

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def fixtures_dir():
    return FIXTURES


@pytest.fixture(scope="session")
def small_raw():
    return synth.generate(synth.SynthConfig(n_users=40, n_items=60, ratings_per_user=20, seed=3))


@pytest.fixture(scope="session")
def small_tasks(small_raw):
    return data.prepare(small_raw, "gender", seed=0)


@pytest.fixture
def small_params(small_tasks):
    arch = Architecture.from_space(small_tasks.space)
    return ModelParams.init(arch, np.random.default_rng(0))


def tiny_arch(**kw):
    """A toy architecture small enough for finite-difference checks."""
    base = dict(user_blocks=[("age", 3), ("gender", 2)], item_blocks=[("genre", 4)], n_levels=3,
                n_classes=2, embed_dim=4, hidden=5, disc_hidden=5)
    base.update(kw)
    return Architecture(**base)
