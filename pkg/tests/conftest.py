import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from lsmssm import expansion, fixedpoint, lsm, models

settings.register_profile("fixed", derandomize=True, deadline=None, max_examples=40, print_blob=True)
settings.load_profile("fixed")

DELTA = 0.05
ORACLES = Path(__file__).with_name("oracles") / "frozen.json"


@pytest.fixture(scope="session")
def frozen():
    return json.loads(ORACLES.read_text())


@pytest.fixture(scope="session")
def pendulum_params():
    return models.PendulumParams()


@pytest.fixture(scope="session")
def pendulum_spec(pendulum_params):
    return models.pendulum_system(pendulum_params)


@pytest.fixture(scope="session")
def pendulum_family(pendulum_spec):
    return lsm.build_family(pendulum_spec, lsm.default_radii(12, DELTA), M=64)


@pytest.fixture(scope="session")
def pendulum_expansion(pendulum_family):
    return expansion.expand(pendulum_family, 2)


@pytest.fixture(scope="session")
def pendulum_refined(pendulum_expansion):
    """Converged refinements at eps = 0.1 and 0.05 (d = 2)."""
    return {eps: fixedpoint.iterate(pendulum_expansion, eps, d=2, stop_tol=1e-10) for eps in (0.1, 0.05)}


@pytest.fixture(scope="session")
def linear_spec():
    return models.linear_decoupled()


@pytest.fixture(scope="session")
def linear_expansion(linear_spec):
    fam = lsm.build_family(linear_spec, lsm.default_radii(8, DELTA), M=32)
    return expansion.expand(fam, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
