import pytest

from selfroute.backend import (
    BackendSpec,
    SyntheticBackend,
    general_synthetic_config,
    reasoning_synthetic_config,
)
from selfroute.simulator import fit_router_for_world, make_world, q7b_world_spec


@pytest.fixture()
def general_backend():
    return SyntheticBackend(
        BackendSpec("synthetic-general", "general"), general_synthetic_config(0)
    )


@pytest.fixture()
def reasoning_backend():
    return SyntheticBackend(
        BackendSpec("synthetic-reasoning", "reasoning", default_max_tokens=32768),
        reasoning_synthetic_config(0),
    )


@pytest.fixture(scope="session")
def small_world():
    """Shared 5x80 world for policy/simulator tests (seed 1)."""
    return make_world(q7b_world_spec(seed=1, n_per_level=80))


@pytest.fixture(scope="session")
def small_world_router(small_world):
    return fit_router_for_world(small_world.spec).model
