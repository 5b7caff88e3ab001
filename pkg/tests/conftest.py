"""
Pytest fixtures for the cell-free simulator tests.
"""

import tempfile
from pathlib import Path

import numpy as np
import pytest

from src.config import Config
from src.logger import SimLogger
from tests.fixtures.instances import fading_snapshot, random_instance, small_config


@pytest.fixture
def temp_dir():
    """Create temporary directory for test files."""
    with tempfile.TemporaryDirectory() as tmpdir:
        yield Path(tmpdir)


@pytest.fixture
def test_config(temp_dir):
    """
    Create a small experiment configuration with temporary output paths.

    Returns:
        Config instance (M=20, K=4, N=4, 3 snapshots)
    """
    config_path = temp_dir / "test_config.yaml"
    config_content = f"""
system:
  M: 20
  N: 4
  K: 4
  D: 200.0
  tau_c: 100
  tau_up: 2
  tau_dp: 4
  cluster_min: 4
  seed: 7

experiment:
  schemes: [CB, NCB, ECB, CBDT]
  power_policy: maximal_ratio
  snapshots: 3

outputs:
  csv: "{temp_dir / 'results' / 'cdf.csv'}"
  summary: "{temp_dir / 'results' / 'summary.yaml'}"

logging:
  log_path: "{temp_dir / 'test.log'}"
  console_level: WARNING
"""
    config_path.write_text(config_content)
    return Config(str(config_path))


@pytest.fixture
def test_logger(temp_dir):
    """
    Create test logger instance.

    Returns:
        SimLogger instance writing to temp log file
    """
    log_path = temp_dir / "test.log"
    return SimLogger(str(log_path))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def system():
    """Small natural-unit SystemConfig (M=4, N=4, K=3)."""
    return small_config()


@pytest.fixture
def copilot_snapshot(system):
    """
    Three users over four APs; users 0 and 2 share uplink pilot 0.

    Downlink pilots are distinct.
    """
    beta = np.array(
        [
            [0.9, 0.2, 0.4],
            [0.3, 0.7, 0.1],
            [0.05, 0.4, 0.8],
            [0.6, 0.1, 0.3],
        ]
    )
    return fading_snapshot(beta, [0, 1, 0], system, dl_pilot=[0, 1, 2])


@pytest.fixture
def random_snapshot(rng):
    """Random (snapshot, config) with M=5, K=3, N=4 and two uplink pilots."""
    return random_instance(rng, M=5, K=3, N=4, tau_up=2)
