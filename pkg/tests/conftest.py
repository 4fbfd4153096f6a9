import numpy as np
import pytest

from einrel.environment import EnvParams, build_environment, constant_environment


@pytest.fixture(scope="session")
def random_env():
    return build_environment(EnvParams())


@pytest.fixture(scope="session")
def unit_env():
    return constant_environment(1.0, 0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record one pass/fail line; lines are printed again in the terminal summary."""

    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
