"""
Desk-scale environments.

- beam_catch: pixel catch game (temporal motion + spatial focus)
- chain: left/right chain walk, also exposed as a TabularMdp
"""

import abc
import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from config.settings import (
    AGENT_PIXEL,
    OBJECT_PIXEL,
    BEAM_ACTIONS,
    CHAIN_ACTIONS,
    ARCHITECTURE_DEFAULTS,
    ENVIRONMENT_DEFAULTS,
    PPO_DEFAULTS,
    OPTIMAL_RETURN_MAX_CELLS,
    OPTIMAL_RETURN_MAX_HORIZON,
)
from components.tabular_game import TabularMdp
from utils.errors import ConfigError, SizeError, UsageError

logger = logging.getLogger(__name__)

R_MAX = 1.0


# ---------------------------------------
# Interface
# ---------------------------------------
class Environment(abc.ABC):
    """Episodic environment with stacked-frame observations in [0, 1]."""

    n_actions: int
    max_episode_length: int

    def __init__(self):
        self._terminal = True

    @property
    @abc.abstractmethod
    def observation_shape(self):
        ...

    @abc.abstractmethod
    def _reset_state(self, seed):
        ...

    @abc.abstractmethod
    def _advance(self, action):
        """Apply one action; return (reward, done)."""

    @abc.abstractmethod
    def _render(self):
        """Current single frame, shape observation_shape[1:]."""

    def reset(self, seed=None):
        self._reset_state(seed)
        self._terminal = False
        frame = self._render()
        self._frames = deque([frame] * self.observation_shape[0], maxlen=self.observation_shape[0])
        return self._observation()

    def step(self, action):
        if self._terminal:
            raise UsageError("step() after episode end; call reset() first")
        if not 0 <= int(action) < self.n_actions:
            raise UsageError(f"action {action} outside [0, {self.n_actions})")
        reward, done = self._advance(int(action))
        self._frames.append(self._render())
        self._terminal = done
        return self._observation(), float(reward), bool(done)

    def _observation(self):
        return np.stack(self._frames).astype(np.float64)


# ---------------------------------------
# Beam catch
# ---------------------------------------
@dataclass(frozen=True)
class BeamCatchConfig:
    height: int = ENVIRONMENT_DEFAULTS['grid_height']
    width: int = ENVIRONMENT_DEFAULTS['grid_width']
    frame_stack: int = ARCHITECTURE_DEFAULTS['frame_stack']
    spawn_every: int = ENVIRONMENT_DEFAULTS['spawn_every']
    max_objects: int = ENVIRONMENT_DEFAULTS['max_objects']
    max_episode_length: int = PPO_DEFAULTS['max_episode_length']

    def __post_init__(self):
        if self.height < 2 or self.width < 1:
            raise ConfigError('grid_height', "grid must be at least 2 x 1")
        if self.spawn_every < 1:
            raise ConfigError('spawn_every', "must be >= 1")
        if self.max_objects < 0:
            raise ConfigError('max_objects', "must be >= 0")


@dataclass
class BeamCatchState:
    """Latent state: agent column, falling objects as [row, col], step counter, rng."""

    agent_col: int
    objects: list
    t: int
    rng: np.random.Generator = field(repr=False)


class BeamCatchEnv(Environment):
    """
    Objects fall one row per step; the agent moves along the bottom row.

    Catching an object as it reaches the bottom row pays +1, missing it -1.
    One object spawns every `spawn_every` steps at a uniform random column
    (at most `max_objects` at once). Spawns never depend on the actions.
    """

    n_actions = len(BEAM_ACTIONS)

    def __init__(self, config=None):
        super().__init__()
        self.config = config or BeamCatchConfig()
        self.max_episode_length = self.config.max_episode_length
        self.state = None

    @property
    def observation_shape(self):
        return (self.config.frame_stack, self.config.height, self.config.width)

    def _spawn(self):
        if len(self.state.objects) < self.config.max_objects:
            self.state.objects.append([0, int(self.state.rng.integers(self.config.width))])

    def _reset_state(self, seed):
        self.state = BeamCatchState(
            agent_col=self.config.width // 2,
            objects=[],
            t=0,
            rng=np.random.default_rng(seed),
        )
        self._spawn()

    def _advance(self, action):
        state, cfg = self.state, self.config
        state.t += 1
        state.agent_col = int(np.clip(state.agent_col + action - 1, 0, cfg.width - 1))

        reward = 0.0
        remaining = []
        for row, col in state.objects:
            row += 1
            if row >= cfg.height - 1:
                reward += 1.0 if col == state.agent_col else -1.0
            else:
                remaining.append([row, col])
        state.objects = remaining

        if state.t % cfg.spawn_every == 0:
            self._spawn()
        return reward, state.t >= self.max_episode_length

    def _render(self):
        cfg = self.config
        frame = np.zeros((cfg.height, cfg.width))
        for row, col in self.state.objects:
            frame[row, col] = OBJECT_PIXEL
        frame[cfg.height - 1, self.state.agent_col] = AGENT_PIXEL
        return frame


def landing_schedule(config, horizon, seed):
    """(step, column) of every object that reaches the bottom row within `horizon` steps."""
    env = BeamCatchEnv(BeamCatchConfig(
        height=config.height, width=config.width, frame_stack=1,
        spawn_every=config.spawn_every, max_objects=config.max_objects,
        max_episode_length=max(horizon, 1),
    ))
    env.reset(seed)
    schedule = []
    for _ in range(horizon):
        landing = [col for row, col in env.state.objects if row + 1 >= config.height - 1]
        t = env.state.t + 1
        env.step(1)
        schedule.extend((t, col) for col in landing)
    return schedule


def optimal_return(config, horizon, seed=0):
    """
    Maximum undiscounted return over `horizon` steps.

    Spawns depend only on the seed, so the latent state reduces to
    (step, agent column) against a known landing schedule; solved by
    backward dynamic programming.
    """
    if config.height * config.width > OPTIMAL_RETURN_MAX_CELLS or horizon > OPTIMAL_RETURN_MAX_HORIZON:
        raise SizeError(
            f"exhaustive solve limited to H*W <= {OPTIMAL_RETURN_MAX_CELLS} "
            f"and horizon <= {OPTIMAL_RETURN_MAX_HORIZON}"
        )
    horizon = min(horizon, config.max_episode_length)
    width = config.width

    step_reward = np.zeros((horizon + 1, width))
    for t, col in landing_schedule(config, horizon, seed):
        step_reward[t] -= 1.0
        step_reward[t, col] += 2.0

    value = np.zeros(width)
    columns = np.arange(width)
    for t in range(horizon, 0, -1):
        # value of arriving at column c after step t
        arrive = step_reward[t] + value
        best = np.full(width, -np.inf)
        for move in (-1, 0, 1):
            best = np.maximum(best, arrive[np.clip(columns + move, 0, width - 1)])
        value = best
    return float(value[width // 2])


# ---------------------------------------
# Chain
# ---------------------------------------
def chain_mdp(n_states, gamma):
    """
    Deterministic chain 0 .. n_states-1 plus an absorbing goal (index n_states).

    Action 0 moves left (stays at 0), action 1 moves right; stepping right
    from n_states-1 enters the goal and pays 1. V*(s) = gamma ** (n_states - 1 - s).
    """
    if n_states < 2:
        raise ConfigError('chain_states', "must be >= 2")
    size = n_states + 1
    goal = n_states
    transition = np.zeros((size, 2, size))
    reward = np.zeros((size, 2))
    for s in range(n_states):
        transition[s, 0, max(s - 1, 0)] = 1.0
        transition[s, 1, s + 1] = 1.0
    reward[n_states - 1, 1] = 1.0
    transition[goal, :, goal] = 1.0
    return TabularMdp(transition, reward, gamma, r_max=R_MAX)


def chain_optimal_values(n_states, gamma):
    distance = np.arange(n_states - 1, -1, -1, dtype=np.float64)
    return np.append(np.power(float(gamma), distance), 0.0)


class ChainEnv(Environment):
    """Chain walk rendered as a (frame_stack, 1, n_states + 1) one-hot image."""

    n_actions = len(CHAIN_ACTIONS)

    def __init__(self, n_states=ENVIRONMENT_DEFAULTS['chain_states'],
                 frame_stack=ARCHITECTURE_DEFAULTS['frame_stack'],
                 max_episode_length=PPO_DEFAULTS['max_episode_length']):
        super().__init__()
        if n_states < 2:
            raise ConfigError('chain_states', "must be >= 2")
        self.n_states = n_states
        self.frame_stack = frame_stack
        self.max_episode_length = max_episode_length
        self.position = 0
        self.t = 0

    @property
    def observation_shape(self):
        return (self.frame_stack, 1, self.n_states + 1)

    def _reset_state(self, seed):
        self.position = 0
        self.t = 0

    def _advance(self, action):
        self.t += 1
        if action == 1 and self.position == self.n_states - 1:
            self.position = self.n_states
            return 1.0, True
        self.position = self.position + 1 if action == 1 else max(self.position - 1, 0)
        return 0.0, self.t >= self.max_episode_length

    def _render(self):
        frame = np.zeros((1, self.n_states + 1))
        frame[0, self.position] = 1.0
        return frame


# ---------------------------------------
# Factory + baselines
# ---------------------------------------
def make_env(config):
    """Environment for a TrainerConfig (selected by env_id)."""
    if config.env_id == 'beam_catch':
        return BeamCatchEnv(BeamCatchConfig(
            height=config.grid_height,
            width=config.grid_width,
            frame_stack=config.frame_stack,
            spawn_every=config.spawn_every,
            max_objects=config.max_objects,
            max_episode_length=config.max_episode_length,
        ))
    if config.env_id == 'chain':
        return ChainEnv(config.chain_states, config.frame_stack, config.max_episode_length)
    raise ConfigError('env_id', f"unknown environment '{config.env_id}'")


def run_episode(env, choose_action, seed):
    obs = env.reset(seed)
    total, done = 0.0, False
    while not done:
        obs, reward, done = env.step(choose_action(obs))
        total += reward
    return total


def random_policy_return(env, episodes, rng):
    """Mean / std of the uniform-random policy's episode return."""
    returns = []
    for _ in range(episodes):
        seed = int(rng.integers(2 ** 31))
        returns.append(run_episode(env, lambda _obs: int(rng.integers(env.n_actions)), seed))
    returns = np.asarray(returns)
    return float(returns.mean()), float(returns.std())
