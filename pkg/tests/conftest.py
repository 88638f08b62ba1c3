"""Shared fixtures.

Full repeated-sampling studies take a long time, so session-scoped fixtures
load them through the on-disk cache under .study_cache/ at the repo root.
The first run populates the cache; later runs (and the study scripts) reuse
it as long as the configuration and package version are unchanged.
"""

import os
import sys

import pytest

from emrp.simulation import SimConfig, run_study_cached

CACHE_DIR = os.path.join(os.path.dirname(__file__), os.pardir, ".study_cache")


def load_study(config: SimConfig):
    def log(msg):
        print(msg, file=sys.stderr, flush=True)

    return run_study_cached(config, CACHE_DIR, log=log)


@pytest.fixture(scope="session")
def main_study():
    return load_study(SimConfig(case="main"))


@pytest.fixture(scope="session")
def int_study():
    return load_study(SimConfig(case="int"))


@pytest.fixture(scope="session")
def main_smoke_study():
    return load_study(SimConfig(case="main").with_smoke())
