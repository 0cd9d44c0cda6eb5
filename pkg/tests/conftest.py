from pathlib import Path

import numpy as np
import pytest

from agnostic_fedavg.optimization import ClientDataset

REPO = Path(__file__).resolve().parents[1]
MNIST_DIR = REPO / "data" / "mnist-10k"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_regression(rng, n=6, d=3):
    X = rng.standard_normal((n, d))
    return ClientDataset(X, X @ rng.standard_normal(d) + 0.1 * rng.standard_normal(n))


def tiny_classification(rng, n=6, d=3, classes=3):
    return ClientDataset(rng.standard_normal((n, d)), rng.integers(0, classes, n))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
