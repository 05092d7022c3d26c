import pathlib

import pytest
import torch

from advkit.pipeline import build_fixture
from advkit.synthdata import synth_batch
from advkit.zoo import load_zoo, train_zoo

CACHE = pathlib.Path(__file__).parent / ".cache"
ZOO_DIR = CACHE / "zoo-v1-seed0"

FIXTURE_SEED = 4242


@pytest.fixture(scope="session")
def zoo():
    if not (ZOO_DIR / "zoo.json").exists():
        train_zoo(ZOO_DIR, seed=0)
    return load_zoo(ZOO_DIR)


@pytest.fixture(scope="session")
def fixture200(zoo):
    return build_fixture(zoo, 200, seed=FIXTURE_SEED)


@pytest.fixture(scope="session")
def fixture50(fixture200):
    return fixture200.select(range(50))


@pytest.fixture()
def rand_batch():
    gen = torch.Generator().manual_seed(123)

    def make(b=4, size=16, seed=None):
        g = gen if seed is None else torch.Generator().manual_seed(seed)
        return synth_batch(b, size, seed=int(torch.randint(0, 10**9, (1,), generator=g)))

    return make
