import os

import pytest
from hypothesis import HealthCheck, settings

from saaz.config import load_config
from saaz.sim import build_infrastructure, load_policies, load_topology

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def cfg():
    return load_config("default")


@pytest.fixture(scope="session")
def topology():
    return load_topology()


@pytest.fixture(scope="session")
def policies():
    return load_policies()


@pytest.fixture
def infra(cfg, topology, policies):
    return build_infrastructure(topology, cfg, policies)
