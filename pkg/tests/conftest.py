import os
import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hgllim.data import generate_synthetic_model
from hgllim.model import Dims

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=15,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_model(rng, D=4, Lt=1, Lw=1, K=2, separation=3.0, noise=0.3):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return generate_synthetic_model(rng, Dims(D=D, Lt=Lt, Lw=Lw, K=K), separation, noise=noise)
