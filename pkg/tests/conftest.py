import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from opntk.lab import STREAM_DATA, ExperimentConfig, synthesize_dataset
from opntk.numkit import SeededRng
from opntk.operator_net import OperatorDataset, init_weights

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def small_dataset(seed=0, n1=3, n2=4, q=5, d=3, targets=True):
    rng = SeededRng(seed, 50)
    u = rng.gaussian((n1, q))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    y = rng.gaussian((n2, d))
    y /= np.linalg.norm(y, axis=1, keepdims=True)
    z = rng.gaussian((n1, n2)) if targets else None
    return OperatorDataset(u, y, targets=z)


@pytest.fixture
def data():
    return small_dataset()


@pytest.fixture
def weights(data):
    return init_weights(40, 6, data.q, data.d, SeededRng(1, 2))


@pytest.fixture(scope="session")
def default_data():
    cfg = ExperimentConfig()
    d, _ = synthesize_dataset(cfg, SeededRng(0, STREAM_DATA), 0)
    return d


@pytest.fixture(scope="session")
def pinn_setup():
    cfg = ExperimentConfig(mode="pinn")
    d, prob = synthesize_dataset(cfg, SeededRng(0, STREAM_DATA), 0)
    return cfg, d, prob


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[number].line())
