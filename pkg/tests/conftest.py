import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hloba import harness
from hloba.config import Config

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_config(**sections) -> Config:
    """A configuration small enough to prepare and cycle in seconds."""
    cfg = Config().replace(
        latent={"variant": "linear", "n_z": 8, "archive_size": 2500, "archive_stride": 2,
                "o2l_hidden": (24,), "o2l_epochs": 3},
        covariance={"nmc_pairs": 60, "r_archive": 600},
        experiment={"cycles": 30, "spinup_cycles": 5, "horizon": 4,
                    "aggregation_windows": (1, 5), "tuning_cycles": 12},
    )
    return cfg.replace(**sections) if sections else cfg


@pytest.fixture(scope="session")
def artifact_cache(tmp_path_factory):
    return str(tmp_path_factory.mktemp("artifacts"))


@pytest.fixture(scope="session")
def small_setup(artifact_cache):
    cfg = small_config()
    return cfg, harness.prepare(cfg, artifact_cache)


REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


@pytest.fixture(scope="session")
def persistent_cache():
    """Artifact cache shared across sessions; the default networks take minutes to train."""
    path = os.environ.get("HLOBA_CACHE", os.path.join(REPO, ".hloba-cache"))
    os.makedirs(path, exist_ok=True)
    return path


@pytest.fixture(scope="session")
def default_setup(persistent_cache):
    cfg = Config()
    return cfg, harness.prepare(cfg, persistent_cache)
