import numpy as np
import pytest

from flowcast.data import SyntheticBasinSpec, generate_synthetic_basin
from flowcast.layers import GATES, LstmParams


def random_lstm(hidden, inp, rng, scale=0.5):
    values = {}
    for g in GATES:
        values[f"W_{g}"] = rng.uniform(-scale, scale, (hidden, inp))
        values[f"U_{g}"] = rng.uniform(-scale, scale, (hidden, hidden))
        values[f"b_{g}"] = rng.uniform(-scale, scale, hidden)
    return LstmParams(**values)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_basin():
    """A 4x4, 400-day synthetic basin shared by the pipeline and training tests."""
    return generate_synthetic_basin(SyntheticBasinSpec(height=4, width=4, days=400, seed=7))


# criterion number -> (passed, detail), filled in by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}")
