import sys

import numpy as np
import pytest

from lvmf import lvgp
from lvmf.problems import generate_doe, get_problem


def doe_training_set(problem, seed, sources=None):
    """Initial design of ``problem`` as a TrainingSet (all sources by default)."""
    plan = generate_doe(problem, seed, sources=sources)
    X, S, Y = [], [], []
    labels = sorted(plan.points)
    for i, s in enumerate(labels):
        pts = plan.points[s]
        X.append(pts)
        S += [i] * len(pts)
        Y.append(problem.evaluate(s, pts))
    return lvgp.TrainingSet(np.vstack(X), np.array(S), np.concatenate(Y), problem.bounds, len(labels))


@pytest.fixture(scope="session")
def simple1d():
    return get_problem("simple1d")


@pytest.fixture(scope="session")
def simple1d_data(simple1d):
    return doe_training_set(simple1d, 0)


@pytest.fixture(scope="session")
def simple1d_model(simple1d_data):
    return lvgp.fit(simple1d_data, seed=0)


@pytest.fixture(scope="session")
def sasena_model():
    prob = get_problem("sasena", "BO")
    return lvgp.fit(doe_training_set(prob, 1), seed=1)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None:
        return
    terminalreporter.section("acceptance criteria")
    for k in range(1, 12):
        terminalreporter.write_line(mod.RESULTS.get(k, f"CRITERION {k}: FAIL - not run or errored before a verdict"))
