import numpy as np
import pytest

from otode.families import (make_martingale, make_multi_period, make_three_marginal,
                            make_two_marginal)
from otode.problem import DiscreteMarginal


def random_marginal(rng, n, lo=-1.0, hi=1.0):
    w = rng.uniform(0.2, 1.0, n)
    return DiscreteMarginal(np.sort(rng.uniform(lo, hi, n)), w / w.sum())


def random_two(rng, n1=4, n2=3, eta=0.5):
    mu, nu = random_marginal(rng, n1), random_marginal(rng, n2)
    return make_two_marginal(mu, nu, rng.normal(size=(n1, n2)), eta)


def random_three(rng, sizes=(3, 4, 3), eta=0.5):
    margs = [random_marginal(rng, n) for n in sizes]
    return make_three_marginal(margs, rng.normal(size=sizes), eta)


def random_martingale(rng, n1=3, n2=5, eta=0.5):
    # symmetric grids give equal means; ν spread wider than μ
    mu = DiscreteMarginal(np.linspace(-0.3, 0.3, n1))
    nu = DiscreteMarginal(np.linspace(-1.0, 1.0, n2))
    return make_martingale(mu, nu, rng.normal(size=(n1, n2)), eta)


def random_multi_period(rng, sizes=(2, 3, 5), eta=0.5):
    mu = DiscreteMarginal(np.linspace(-0.1, 0.1, sizes[0]))
    th = DiscreteMarginal(np.linspace(-0.4, 0.4, sizes[1]))
    nu = DiscreteMarginal(np.linspace(-1.0, 1.0, sizes[2]))
    return make_multi_period(mu, th, nu, rng.normal(size=sizes), eta)


FAMILY_MAKERS = {
    "two_marginal": random_two,
    "three_marginal": random_three,
    "martingale": random_martingale,
    "multi_period_martingale": random_multi_period,
}


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
