import numpy as np
import pytest

from hderm import MultinomialLoss, solve_critical_point
from hderm.asymptotics import default_rule

R00_SYM = np.array([[1.0, 0.5], [0.5, 1.0]])  # two symmetric non-reference classes


@pytest.fixture(scope="session")
def mn2():
    return MultinomialLoss(2)


@pytest.fixture(scope="session")
def rule24(mn2):
    return default_rule(mn2, nodes_per_dim=24)


@pytest.fixture(scope="session")
def rule14(mn2):
    return default_rule(mn2, nodes_per_dim=14)


@pytest.fixture(scope="session")
def p6_solution(mn2, rule24):
    """Converged multinomial solution at alpha=3, lambda=0.1, R00^s(1)."""
    import time

    t0 = time.perf_counter()
    sol = solve_critical_point(mn2, 3.0, 0.1, R00_SYM, rule=rule24)
    sol.solve_seconds = time.perf_counter() - t0
    return sol
