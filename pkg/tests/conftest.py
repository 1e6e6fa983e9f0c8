import numpy as np
import pytest

from byzant.problems import ProblemFamily, build_problem
from byzant.trial import build_trial_set


@pytest.fixture(scope="session")
def quad_family():
    return ProblemFamily(kind="quadratic", d=10, L=10.0, mu=1.0, sigma=0.5, delta1=2.0)


@pytest.fixture(scope="session")
def quad_problem(quad_family):
    return build_problem(quad_family, 5, seed=101)


@pytest.fixture(scope="session")
def quad_trial(quad_problem):
    shards, _ = quad_problem
    return build_trial_set(shards[0], 400, seed=101)


@pytest.fixture(scope="session")
def logistic_problem():
    fam = ProblemFamily(kind="logistic", d=6, L=4.0, mu=0.1, sigma=0.5, delta1=0.5)
    return build_problem(fam, 4, seed=33)


@pytest.fixture(scope="session")
def nonconvex_problem():
    fam = ProblemFamily(kind="nonconvex-quadratic-plus-sine", d=6, L=8.0, mu=0.0, sigma=0.2)
    return build_problem(fam, 4, seed=57)


@pytest.fixture()
def rng():
    return np.random.default_rng(20240817)
