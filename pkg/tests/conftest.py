import numpy as np
import pytest

from ssldro.data import Dataset, SupportSet, build_support

# acceptance results collected by tests/test_acceptance.py and echoed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_instance(rng, n=3, n_unlabeled=2, d=2, loss="logistic"):
    """Labeled/unlabeled pair plus support, with distinct points."""
    X = rng.normal(size=(n, d))
    if loss == "logistic":
        y = rng.choice([-1.0, 1.0], size=n)
        if n >= 2:
            y[0], y[1] = 1.0, -1.0
    else:
        y = rng.normal(size=n)
    labeled = Dataset(X, y)
    unlabeled = Dataset(rng.normal(size=(n_unlabeled, d))) if n_unlabeled else None
    return labeled, unlabeled, build_support(labeled, unlabeled)


def mixed_instance(rng, n, n_extra, d=2, loss="logistic"):
    """Labeled data and a support of ``n + 2 * n_extra`` (logistic) or ``n + n_extra`` (squared) points.

    For squared loss the extra predictors carry responses drawn from the labeled
    ones, so that transport between them and the labeled points has finite cost.
    """
    if loss == "logistic":
        L, _, S = random_instance(rng, n=n, n_unlabeled=n_extra, d=d, loss=loss)
        return L, S
    L, _, _ = random_instance(rng, n=n, n_unlabeled=0, d=d, loss=loss)
    extra = rng.normal(size=(n_extra, d))
    S = SupportSet(np.vstack([L.X, extra]), np.r_[L.y, L.y[rng.integers(0, n, size=n_extra)]],
                   np.r_[np.zeros(n, dtype=int), np.ones(n_extra, dtype=int)], n, n_extra)
    return L, S


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
