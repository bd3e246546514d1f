import numpy as np
import pytest

from mapattack import model_zoo


@pytest.fixture(scope="session")
def default_data():
    return model_zoo.gen_dataset(model_zoo.DatasetSpec())


@pytest.fixture(scope="session")
def default_models(default_data):
    return model_zoo.train_default_models(default_data)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA = []


@pytest.fixture(scope="session")
def criterion_log():
    return _CRITERIA


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
