"""Generalized Advantage Estimation, returns and advantage normalization."""

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from config.settings import ADV_STD_GUARD, ADV_CONTRACT_TOL
from utils.errors import ConfigError, ContractViolationError, DegenerateBatchError, ShapeError


# ---------------------------------------
# Rollout record
# ---------------------------------------
@dataclass
class Trajectory:
    """
    Fixed-length rollout.

    values has one extra entry: the bootstrap value of the state
    that follows the last recorded step.
    """

    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    log_probs: np.ndarray
    dones: np.ndarray
    episode_returns: list = field(default_factory=list)

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=np.int64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        self.log_probs = np.asarray(self.log_probs, dtype=np.float64)
        self.dones = np.asarray(self.dones, dtype=bool)

        length = len(self.rewards)
        for name in ('actions', 'log_probs', 'dones'):
            if len(getattr(self, name)) != length:
                raise ShapeError(f"{name} has length {len(getattr(self, name))}, expected {length}")
        if self.observations is not None and len(self.observations) != length:
            raise ShapeError(f"observations has length {len(self.observations)}, expected {length}")
        if len(self.values) != length + 1:
            raise ShapeError(f"values must have length T+1 = {length + 1}, got {len(self.values)}")

    @property
    def length(self):
        return len(self.rewards)


@dataclass
class AdvantageBatch:
    advantages: np.ndarray
    raw_advantages: np.ndarray
    returns: np.ndarray

    @property
    def stats(self):
        """Population mean / std of the (normalized) advantages."""
        return float(np.mean(self.advantages)), float(np.std(self.advantages))


# ---------------------------------------
# GAE
# ---------------------------------------
def compute_gae(traj, gamma, lam):
    """
    Backward recursion

        delta_t = r_t + gamma * (1 - done_t) * V(s_{t+1}) - V(s_t)
        A_t     = delta_t + gamma * lam * (1 - done_t) * A_{t+1}

    returns_t = A_t + V(s_t). Advantages are not normalized yet.
    """
    if not 0.0 <= gamma < 1.0:
        raise ConfigError('gamma', "must lie in [0, 1)")
    if not 0.0 <= lam <= 1.0:
        raise ConfigError('gae_lambda', "must lie in [0, 1]")

    rewards, values = traj.rewards, traj.values
    if len(values) != len(rewards) + 1:
        raise ShapeError("values must have length T+1")
    not_done = 1.0 - traj.dones.astype(np.float64)

    advantages = np.zeros_like(rewards)
    running = 0.0
    for t in reversed(range(len(rewards))):
        delta = rewards[t] + gamma * not_done[t] * values[t + 1] - values[t]
        running = delta + gamma * lam * not_done[t] * running
        advantages[t] = running

    returns = advantages + values[:-1]
    return AdvantageBatch(advantages.copy(), advantages, returns)


def normalize(batch):
    """(raw - mean) / (population std + 1e-8) over the whole rollout."""
    raw = np.asarray(batch.raw_advantages, dtype=np.float64)
    if raw.size < 2:
        raise DegenerateBatchError("normalization needs at least two advantages")
    normalized = (raw - raw.mean()) / (raw.std() + ADV_STD_GUARD)
    return replace(batch, advantages=normalized)


def check_advantage_contract(mean, std):
    """
    Raise unless advantages look normalized.

    A rollout whose normalized advantages are all zero (constant raw
    advantages hit the std guard) is accepted as normalized.
    """
    degenerate = std <= ADV_STD_GUARD and abs(mean) <= ADV_STD_GUARD
    if abs(mean) > ADV_CONTRACT_TOL or (abs(std - 1.0) > ADV_CONTRACT_TOL and not degenerate):
        raise ContractViolationError(
            f"advantages not normalized (mean {mean:.3g}, std {std:.3g})"
        )


# ---------------------------------------
# Minibatching
# ---------------------------------------
@dataclass
class Minibatch:
    """
    One slice of a rollout.

    advantage_mean / advantage_std describe the full normalized
    rollout the slice was drawn from; left out, they are measured on
    the slice itself.
    """

    observations: np.ndarray
    actions: np.ndarray
    old_log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    advantage_mean: Optional[float] = None
    advantage_std: Optional[float] = None

    def __post_init__(self):
        # unmeasured slices report their own statistics
        advantages = np.asarray(self.advantages, dtype=np.float64)
        if self.advantage_mean is None:
            self.advantage_mean = float(advantages.mean())
        if self.advantage_std is None:
            self.advantage_std = float(advantages.std())

    def __len__(self):
        return len(self.actions)


def iterate_minibatches(traj, batch, batch_size, rng):
    """Shuffled minibatches for one epoch; the last one may be shorter."""
    mean, std = batch.stats
    order = rng.permutation(traj.length)
    for start in range(0, traj.length, batch_size):
        index = order[start:start + batch_size]
        yield Minibatch(
            observations=traj.observations[index],
            actions=traj.actions[index],
            old_log_probs=traj.log_probs[index],
            advantages=batch.advantages[index],
            returns=batch.returns[index],
            advantage_mean=mean,
            advantage_std=std,
        )
