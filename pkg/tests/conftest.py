import numpy as np
import pytest
from hypothesis import settings

from vitpatch.autograd import precision

# Fixed example streams keep the suite reproducible run to run.
settings.register_profile("deterministic", derandomize=True)
settings.load_profile("deterministic")


@pytest.fixture
def f64():
    """Run the test body in 64-bit verification mode."""
    with precision("float64"):
        yield


@pytest.fixture
def f32():
    with precision("float32"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_criteria: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line; the terminal summary prints them all."""

    def record(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})"
        _criteria[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _criteria:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_criteria):
            terminalreporter.write_line(_criteria[number])
