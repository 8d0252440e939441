import numpy as np
import pytest

from ofgreg.data import make_pair, PhantomSpec, FieldSpec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def phantom_pair():
    """A standard 32^3 synthetic pair (A=3, sigma=4)."""
    return make_pair(PhantomSpec(), FieldSpec(3.0, 4.0, seed=11), seed=5, name="standard")


@pytest.fixture(scope="session")
def small_pair():
    return make_pair(PhantomSpec(dims=(16, 16, 16)), FieldSpec(1.5, 3.0, seed=3), seed=2, name="small")


# ---------------------------------------------------------------- acceptance report

_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def criterion():
    """Record one pass/fail line per acceptance criterion; printed in the terminal summary."""

    def record(number, passed, detail):
        line = f"CRITERION {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
