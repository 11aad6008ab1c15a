"""
Pytest configuration and shared fixtures for ddpflow tests
"""

import numpy as np
import pytest

from ddpflow.data import build_hankel, generate_dataset, synth_profiles
from ddpflow.network import build_network, synthetic_feeder
from ddpflow.reduction import build_scenarios

SEED = 3
TEST_OFFSET = 1000


@pytest.fixture
def chain_network():
    """Three-branch chain 0 - 1 - 2 - 3"""
    return build_network(
        [0, 1, 2, 3],
        0,
        [(1, 0, 0.01, 0.02), (2, 1, 0.02, 0.01), (3, 2, 0.015, 0.015)],
    )


@pytest.fixture
def star_network():
    """Slack feeding one branching node with two laterals: 0 - 1 - {2, 3}"""
    return build_network(
        [0, 1, 2, 3],
        0,
        [(1, 0, 0.01, 0.02), (2, 1, 0.02, 0.01), (3, 1, 0.015, 0.03)],
    )


@pytest.fixture(scope="session")
def feeder():
    """Small random radial feeder (n = 6)"""
    return synthetic_feeder(7, seed=SEED)


@pytest.fixture(scope="session")
def profiles(feeder):
    """Load profiles for the small feeder"""
    return synth_profiles(feeder.n, t_day=48, seed=SEED)


@pytest.fixture(scope="session")
def train_dataset(feeder, profiles):
    """Persistently exciting training trajectory"""
    return generate_dataset(feeder, profiles, diversity=0.1, seed=SEED)


@pytest.fixture(scope="session")
def test_dataset(feeder, profiles):
    """Lighter, independently jittered test day"""
    return generate_dataset(
        feeder, profiles, scale=0.6, diversity=0.1, seed=SEED + TEST_OFFSET
    )


@pytest.fixture(scope="session")
def hankel(train_dataset):
    """Full-output Hankel system of the training data"""
    return build_hankel(train_dataset)


@pytest.fixture(scope="session")
def scenarios(feeder, train_dataset):
    """Historical phasor scenarios (every 4th training step)"""
    return build_scenarios(feeder, train_dataset, stride=4)


@pytest.fixture
def rng():
    """Seeded random generator"""
    return np.random.default_rng(SEED)
