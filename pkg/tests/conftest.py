import os

import pytest
from hypothesis import HealthCheck, settings

from playplan.core import SeededRng
from playplan.dynamics import StochasticWrapperParams, make_model
from playplan.play import fit_prior, gen_play

settings.register_profile(
    "default", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("quick", deadline=None, max_examples=10)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def pusht_play():
    model = make_model("pusht", noise=StochasticWrapperParams())
    return gen_play("pusht", model, 20_000, 1)


@pytest.fixture(scope="session")
def pusht_prior(pusht_play):
    return fit_prior(pusht_play)


@pytest.fixture
def rng():
    return SeededRng(1234)
