import pytest

from bitforge.cli import bundled_model_path
from bitforge.data import synthetic_splits
from bitforge.netgraph import load_model
from bitforge.search import pretrain_float

ACCEPTANCE = {}


@pytest.fixture(scope="session")
def splits():
    return synthetic_splits(seed=0)


@pytest.fixture(scope="session")
def trained_model(splits):
    """Desk net after the default float pretraining."""
    return pretrain_float(load_model(bundled_model_path()), splits)


@pytest.fixture
def model(trained_model):
    return trained_model.copy()


def record(criterion, ok, detail):
    ACCEPTANCE[criterion] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
