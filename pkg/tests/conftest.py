import warnings

import numpy as np
import pytest

from fairsvi.data import encode_frame, synth_gmm, synth_nb, synth_sp
from fairsvi.distributions import RngStream

ACCEPTANCE_LINES = []


def record_criterion(number, title, passed, detail=""):
    """Store and print one acceptance verdict line."""
    line = f"[criterion {number:>2}] {'PASS' if passed else 'FAIL'}  {title}"
    if detail:
        line += f"  ({detail})"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return RngStream(1234)


@pytest.fixture(scope="session")
def nb_splits():
    frame, schema, _ = synth_nb(600, K=2, n_attributes=3, n_categories=3, skew=0.4, rng=RngStream(5))
    return encode_frame(frame, schema)


@pytest.fixture(scope="session")
def gmm_splits():
    frame, schema, _ = synth_gmm(600, K=2, D=2, separation=4.0, rng=RngStream(6))
    return encode_frame(frame, schema)


@pytest.fixture(scope="session")
def sp_splits():
    frame, schema, _ = synth_sp(600, rng=RngStream(7))
    return encode_frame(frame, schema)


@pytest.fixture(autouse=True)
def _quiet_numpy():
    with warnings.catch_warnings(), np.errstate(over="ignore", under="ignore"):
        yield
