import numpy as np
import pytest

from seqboed.aldi import SequentialTarget
from seqboed.forward_models import LinearModel
from seqboed.gaussian_core import Gaussian


@pytest.fixture
def linear_problem():
    """Scalar linear model with prior N(2, 2) and unit noise."""
    prior = Gaussian(2.0, 2.0)
    noise = Gaussian(0.0, 1.0)
    return prior, noise, LinearModel(), SequentialTarget(prior, noise)


def random_spd(rng, d, floor=0.1):
    a = rng.standard_normal((d, d))
    return a @ a.T + floor * np.eye(d)
