import os
from pathlib import Path

import numpy as np
import pytest
import torch

from embattr.io import find_mnist, load_mnist

torch.set_num_threads(1)

REPO = Path(__file__).resolve().parents[1]


def pytest_configure(config):
    os.environ.setdefault("EMBATTR_CACHE", str(REPO / ".embattr_cache"))


@pytest.fixture(scope="session")
def mnist_dir():
    d = find_mnist() or find_mnist(REPO.parent / "data" / "mnist")
    if d is None:
        pytest.skip("MNIST IDX files not found (set EMBATTR_MNIST)")
    return d


@pytest.fixture(scope="session")
def mnist_train(mnist_dir):
    return load_mnist(mnist_dir, "train")


@pytest.fixture(scope="session")
def mnist_test(mnist_dir):
    return load_mnist(mnist_dir, "test")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion."""
    def report(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}"
        _CRITERIA[number] = line
        print(line)
        return ok
    return report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[k])
