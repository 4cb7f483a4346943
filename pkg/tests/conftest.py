import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from firma import data

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def digits():
    return data.load_digits_csv(data.digits_csv_path())


@pytest.fixture
def blobs():
    return data.synth_blobs(200, 8, 4, 0.05, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Acceptance lines are collected here and echoed after the run so they show
# up without -s.
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: [int(t) if t.isdigit() else t
                                                            for t in s.split()[1].split(".")]):
            terminalreporter.write_line(line)
