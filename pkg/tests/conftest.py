import pytest

from selfheal.cluster_sim import generate_dataset
from selfheal.harness import ExperimentConfig


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: multi-minute training runs")


@pytest.fixture(scope="session")
def default_data():
    cfg = ExperimentConfig()
    return generate_dataset(cfg.sim_config(), cfg.sim_seed)
