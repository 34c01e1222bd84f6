import numpy as np
import pytest

from poisontrace.core import LabeledDataset


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def balanced_dataset(n: int, num_classes: int, dim: int = 3) -> LabeledDataset:
    X = np.arange(n * dim, dtype=np.float64).reshape(n, dim)
    return LabeledDataset(X, np.arange(n) % num_classes, num_classes)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES):
            terminalreporter.write_line(line)
