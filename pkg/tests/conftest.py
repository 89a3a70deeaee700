import numpy as np
import pytest

from loanrobust.dataset import synthetic_fixture
from loanrobust.nn import MlpModel, TrainConfig, train


@pytest.fixture(scope="session")
def fixture_data():
    """The frozen 5000/1000 synthetic split (seed 7)."""
    return synthetic_fixture(seed=7)


@pytest.fixture(scope="session")
def clean_model(fixture_data):
    tr, _ = fixture_data
    return train(MlpModel.init(tr.x.shape[1], tr.schema.n_classes, seed=1), tr, TrainConfig(epochs=30, seed=1))


@pytest.fixture(scope="session")
def small_data(fixture_data):
    """First 300 test rows: quick attack fixtures."""
    _, te = fixture_data
    return te.subset(np.arange(300))


ACCEPTANCE_LINES = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
