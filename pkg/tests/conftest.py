import numpy as np
import pytest
import runez
from runez.conftest import cli, isolated_log_setup, logged, temp_folder

from betalab.__main__ import main
from betalab.core import HIGH_GAP, LOW_GAP, ModelShape, PreferenceDataset, Triplet, TripletMeta
from betalab.synth import GenConfig, generate, make_ground_truth


cli.default_main = main


# This is here only to satisfy flake8, mentioning the imported fixtures so they're not declared "unused"
assert all(s for s in [cli, isolated_log_setup, logged, temp_folder])


@pytest.fixture(autouse=True)
def isolated_tunables():
    """Tunables passed via '--set' are added to runez.config, don't let them leak between tests"""
    providers = list(runez.config.CONFIG.providers)
    yield
    runez.config.CONFIG.providers = providers


@pytest.fixture
def shape():
    return ModelShape(P=2, T=3, V=4)


@pytest.fixture
def gen_cfg():
    return GenConfig.from_dict(dict(P=2, T=3, V=4, n_triplets=256, n_test=64, flip_prob=0.05, seed=7))


@pytest.fixture
def gt(gen_cfg):
    return make_ground_truth(gen_cfg.shape, gen_cfg.seed)


@pytest.fixture
def dataset(gen_cfg, gt):
    return generate(gen_cfg, gt)


@pytest.fixture
def handmade(shape):
    """A few triplets written by hand, covering both gap classes, a flip and a degenerate pair"""
    triplets = [
        Triplet(0, (0, 1, 2), (3, 3, 3), TripletMeta(LOW_GAP, False, 1.5, -0.5)),
        Triplet(1, (1, 1, 1), (0, 2, 3), TripletMeta(HIGH_GAP, False, 2.0, -3.0)),
        Triplet(0, (2, 0, 1), (0, 1, 2), TripletMeta(LOW_GAP, True, -0.25, 0.75)),
        Triplet(1, (3, 2, 1), (3, 2, 1), TripletMeta(LOW_GAP, False, 0.5, 0.5)),
    ]
    return PreferenceDataset(shape, triplets, "handmade")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
