import numpy as np
import pytest

from survrule.cohort import Cohort, Subject
from survrule import synth


def cohort_of(rows, k_max=3, w=None):
    """Cohort from (a, delta, time) triples with a single zero covariate unless ``w`` is given."""
    rows = list(rows)
    if w is None:
        w = np.zeros((len(rows), 1))
    return Cohort.from_subjects(
        [Subject(f"s{i}", tuple(np.atleast_1d(w[i])), a, d, t) for i, (a, d, t) in enumerate(rows)],
        k_max=k_max,
    )


@pytest.fixture(scope="session")
def dgp_a():
    return synth.dgp_a()


@pytest.fixture(scope="session")
def dgp_b():
    return synth.dgp_b()


@pytest.fixture(scope="session")
def dgp_c():
    return synth.dgp_c()


@pytest.fixture(scope="session")
def cohort_a500(dgp_a):
    return synth.simulate(dgp_a, 500, 11)
