import math
from types import SimpleNamespace

import numpy as np
import pytest

from earlywf.profiling import ProfileStore, WebsiteProfile


class AngleEncoder:
    """Stand-in encoder: the embedding angle grows with the number of packets seen.

    ``z = (cos(k * step), sin(k * step))`` where ``k`` is the TAF packet count,
    so sphere hits can be placed at known prefix lengths.
    """

    def __init__(self, rho=100, theta_ms=80.0, step=0.01):
        self.eta = 2
        self.step = step
        self.config = SimpleNamespace(rho=rho, theta_ms=theta_ms)

    def embed(self, X):
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 3
        X = X[None] if single else X
        k = X[:, 0].sum(axis=(1, 2))
        z = np.stack([np.cos(k * self.step), np.sin(k * self.step)], axis=1)
        return z[0] if single else z

    def angle_vector(self, packets):
        return np.array([math.cos(packets * self.step), math.sin(packets * self.step)])


def make_store(centroids, radii, names=None):
    names = names or [f"s{i}" for i in range(len(centroids))]
    profs = {
        n: WebsiteProfile(n, np.asarray(c, dtype=float), float(r), 10)
        for n, c, r in zip(names, centroids, radii)
    }
    return ProfileStore(profs, len(centroids[0]))


@pytest.fixture
def angle_encoder():
    return AngleEncoder()


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
