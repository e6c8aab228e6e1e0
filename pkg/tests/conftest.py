import numpy as np
import pytest

from sgpdmp.targets import LinearRegressionModel, LogisticRegressionModel, synth_linear_regression, synth_logistic


@pytest.fixture(scope="session")
def linear_small():
    data, truth = synth_linear_regression(500, 3, c=1.0, seed=1)
    return LinearRegressionModel(data), truth


@pytest.fixture(scope="session")
def logistic_small():
    data, truth = synth_logistic(300, 4, seed=2)
    return LogisticRegressionModel(data), truth


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = pytest.StashKey()


@pytest.fixture
def criterion(request):
    """Record one acceptance result; the lines are repeated in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number, title, passed, detail=""):
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}" + (f"  ({detail})" if detail else "")
        lines.append((number, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
