from pathlib import Path

import numpy as np
import pytest

from defdistill.data import load_mnist_idx

ROOT = Path(__file__).resolve().parents[1]
DESK = ROOT / "data" / "mnist-desk"
FIXTURES = Path(__file__).parent / "data"

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(20160522)


@pytest.fixture(scope="session")
def desk_paths():
    return {
        "train_images": str(DESK / "train-images-idx3-ubyte.gz"),
        "train_labels": str(DESK / "train-labels-idx1-ubyte.gz"),
        "test_images": str(DESK / "t10k-images-idx3-ubyte.gz"),
        "test_labels": str(DESK / "t10k-labels-idx1-ubyte.gz"),
    }


@pytest.fixture(scope="session")
def desk_train(desk_paths):
    return load_mnist_idx(desk_paths["train_images"], desk_paths["train_labels"])


@pytest.fixture(scope="session")
def desk_test(desk_paths):
    return load_mnist_idx(desk_paths["test_images"], desk_paths["test_labels"])
