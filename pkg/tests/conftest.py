import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from connrank.model import ScanRecord  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_scans(subjects, sessions=(1, 2), tr=2.0):
    return [
        ScanRecord(f"{s}_ses-{k}", s, k, tr, n_timepoints=100)
        for s in subjects
        for k in sessions
    ]


@pytest.fixture
def labeled_scans():
    return make_scans([f"subj{i:02d}" for i in range(1, 21)])


def random_rank_matrix(n, rng):
    """Rank matrix induced by a random symmetric distance matrix."""
    from connrank.reliability import DistanceMatrix, rank_matrix

    d = rng.random((n, n))
    d = d + d.T
    np.fill_diagonal(d, 0)
    return rank_matrix(DistanceMatrix(d))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
