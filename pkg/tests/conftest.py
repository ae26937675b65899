import numpy as np
import pytest

from spatial_sir.infectivity import InfectivityModel
from spatial_sir.kernels import Kernel
from spatial_sir.model import ExperimentConfig, InitialCondition


def make_config(kernel=None, law=None, law0=None, frac_S=0.99, frac_I=0.01, frac_R=0.0, **kw):
    law = law or InfectivityModel("markov", {"a": 0.5, "rho": 0.25})
    initial = kw.pop("initial", None) or InitialCondition(frac_S, frac_I, frac_R)
    return ExperimentConfig(
        kernel=kernel or Kernel("constant", {"k": 1.0}),
        infectivity_initial=law0 or law,
        infectivity_new=law,
        initial=initial,
        **kw,
    )


@pytest.fixture
def homogeneous():
    return make_config(horizon=10.0, population_size=500, grid=4, dt=0.01)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
