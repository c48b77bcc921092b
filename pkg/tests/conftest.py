import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config.trainer_config import TrainerConfig  # noqa: E402
from components.advantage import Minibatch  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="also run long training comparisons")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training comparison")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """Chain walk small enough for several full training iterations per test."""
    return TrainerConfig(
        env_id='chain',
        chain_states=3,
        frame_stack=2,
        total_timesteps=48,
        rollout_length=16,
        batch_size=8,
        ppo_epochs=2,
        feature_dim=8,
        hidden_units=8,
        attention_layers=2,
        max_episode_length=12,
        learning_rate=1e-3,
        lambda_cost=0.5,
        debug=True,
    )


@pytest.fixture
def tiny_beam_config():
    return TrainerConfig(
        env_id='beam_catch',
        grid_height=6,
        grid_width=5,
        frame_stack=2,
        spawn_every=2,
        max_objects=2,
        total_timesteps=32,
        rollout_length=16,
        batch_size=8,
        ppo_epochs=1,
        feature_dim=8,
        hidden_units=8,
        attention_layers=3,
        max_episode_length=10,
    )


@pytest.fixture
def make_minibatch():
    """Normalized synthetic minibatch for a given observation shape."""

    def build(rng, observation_shape, n_actions, size=6):
        advantages = rng.normal(size=size)
        advantages = (advantages - advantages.mean()) / advantages.std()
        return Minibatch(
            observations=rng.random((size,) + tuple(observation_shape)),
            actions=rng.integers(0, n_actions, size=size),
            old_log_probs=np.full(size, np.log(1.0 / n_actions)),
            advantages=advantages,
            returns=rng.normal(size=size),
            advantage_mean=float(advantages.mean()),
            advantage_std=float(advantages.std()),
        )

    return build
