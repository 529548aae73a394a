import os

import numpy as np
import pytest
from hypothesis import settings

DATA = os.path.join(os.path.dirname(__file__), "data")
COHORT = os.path.join(DATA, "cohort200")
GOLDEN = os.path.join(DATA, "golden")
PLINK_FIXTURE = os.path.join(DATA, "fixture50x20.bed")

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_dosages(rng, n, p, missing=0.0, maf=(0.05, 0.5)):
    f = rng.uniform(*maf, size=p)
    d = rng.binomial(2, f, size=(n, p)).astype(float)
    if missing:
        d[rng.random((n, p)) < missing] = np.nan
    return d


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
