"""
Exact finite-state engine for the standard and Stackelberg-Bellman operators.

A game instance augments a finite MDP with an enumerable grid of leader
(perception) parameter points, each carrying a per-state cost, and a grid
of follower maps phi: state -> action. The Stackelberg backup is

    (T_S f)(s, a) = max_theta min_phi [ R(s, a) - lambda * C_theta(s)
                                        + gamma * sum_s' P(s'|s, a) f(s', phi(s')) ]

with "cooperative" mode replacing the inner min by a max. All arrays are
read-only after construction.
"""

import itertools
import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from config.settings import TABULAR_TOL, TABULAR_MAX_ITERS, STALE_FACTOR, TRANSITION_ATOL
from utils.errors import (
    ConfigError,
    InvalidValueError,
    NonConvergenceError,
    ShapeError,
    StaleInputError,
    UndefinedRatioError,
)
from utils.helpers import sup_norm

logger = logging.getLogger(__name__)

GAME_MODES = ('maxmin', 'cooperative')


def _frozen_array(values, dtype=np.float64):
    array = np.array(values, dtype=dtype)
    array.setflags(write=False)
    return array


# ---------------------------------------
# Domain types
# ---------------------------------------
@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Finite MDP: transition (s, a, s'), reward (s, a), gamma in [0, 1)."""

    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    r_max: float = None

    def __post_init__(self):
        transition = _frozen_array(self.transition)
        reward = _frozen_array(self.reward)
        object.__setattr__(self, 'transition', transition)
        object.__setattr__(self, 'reward', reward)

        if transition.ndim != 3 or transition.shape[0] != transition.shape[2]:
            raise ShapeError(f"transition must be (S, A, S), got {transition.shape}")
        if reward.shape != transition.shape[:2]:
            raise ShapeError(f"reward must be {transition.shape[:2]}, got {reward.shape}")
        if transition.shape[0] == 0 or transition.shape[1] == 0:
            raise ShapeError("need at least one state and one action")
        if not np.all(np.isfinite(transition)) or not np.all(np.isfinite(reward)):
            raise InvalidValueError("transition and reward must be finite")
        if np.any(transition < 0.0) or np.any(transition > 1.0):
            raise ConfigError('transition', "entries must lie in [0, 1]")
        row_sums = transition.sum(axis=2)
        if np.max(np.abs(row_sums - 1.0)) > TRANSITION_ATOL:
            raise ConfigError('transition', "every row over s' must sum to 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError('gamma', "must lie in [0, 1)")

        observed = float(np.max(np.abs(reward)))
        if self.r_max is None:
            object.__setattr__(self, 'r_max', observed)
        elif observed > self.r_max:
            raise ConfigError('reward', f"|R| exceeds declared r_max {self.r_max}")

    @property
    def n_states(self):
        return self.transition.shape[0]

    @property
    def n_actions(self):
        return self.transition.shape[1]


@dataclass(frozen=True, eq=False)
class TabularGameMdp:
    """
    Stackelberg-MDP: base MDP + theta grid with cost table + phi grid.

    - theta_grid: labels of the leader points (only their cost enters the backup)
    - phi_grid: (n_phi, n_states) int array, row j is the map s -> phi_j(s)
    - cost: (n_states, n_theta) table with entries in [0, 1]
    """

    base: TabularMdp
    theta_grid: tuple
    phi_grid: np.ndarray
    cost: np.ndarray
    lambda_cost: float
    mode: str = 'maxmin'

    def __post_init__(self):
        theta_grid = tuple(self.theta_grid)
        phi_grid = _frozen_array(self.phi_grid, dtype=np.int64)
        cost = _frozen_array(self.cost)
        object.__setattr__(self, 'theta_grid', theta_grid)
        object.__setattr__(self, 'phi_grid', phi_grid)
        object.__setattr__(self, 'cost', cost)

        if len(theta_grid) == 0:
            raise ConfigError('theta_grid', "must be nonempty")
        if phi_grid.size == 0:
            raise ConfigError('phi_grid', "must be nonempty")
        if phi_grid.ndim != 2 or phi_grid.shape[1] != self.base.n_states:
            raise ShapeError(f"phi_grid must be (n_phi, {self.base.n_states}), got {phi_grid.shape}")
        if np.any(phi_grid < 0) or np.any(phi_grid >= self.base.n_actions):
            raise ConfigError('phi_grid', f"actions must lie in [0, {self.base.n_actions})")
        if cost.shape != (self.base.n_states, len(theta_grid)):
            raise ShapeError(f"cost must be ({self.base.n_states}, {len(theta_grid)}), got {cost.shape}")
        if not np.all(np.isfinite(cost)) or np.any(cost < 0.0) or np.any(cost > 1.0):
            raise ConfigError('cost', "entries must lie in [0, 1]")
        if not self.lambda_cost >= 0.0:
            raise ConfigError('lambda_cost', "must be >= 0")
        if self.mode not in GAME_MODES:
            raise ConfigError('mode', f"must be one of {GAME_MODES}")

    @classmethod
    def from_mdp(cls, mdp, phi_grid='all', theta_grid=(0,), cost=None, lambda_cost=0.0, mode='maxmin'):
        """Lift a plain MDP into a game (defaults: one zero-cost theta, all phi maps)."""
        if isinstance(phi_grid, str):
            if phi_grid != 'all':
                raise ConfigError('phi_grid', "must be explicit rows or 'all'")
            phi_grid = enumerate_phi(mdp.n_states, mdp.n_actions)
        if cost is None:
            cost = np.zeros((mdp.n_states, len(theta_grid)))
        return cls(mdp, tuple(theta_grid), phi_grid, cost, lambda_cost, mode)

    @property
    def gamma(self):
        return self.base.gamma

    @property
    def shape(self):
        return self.base.reward.shape


@dataclass(frozen=True, eq=False)
class ValueTable:
    """Real table f(s, a); every entry finite."""

    values: np.ndarray

    def __post_init__(self):
        values = _frozen_array(self.values)
        if values.ndim != 2:
            raise ShapeError(f"value table must be (S, A), got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise InvalidValueError("value table holds non-finite entries")
        object.__setattr__(self, 'values', values)

    @classmethod
    def constant(cls, shape, value):
        return cls(np.full(shape, float(value)))


class StackelbergBackup(NamedTuple):
    values: ValueTable
    argmax_theta: np.ndarray
    argmin_phi: np.ndarray


class ValueIterationResult(NamedTuple):
    fixed_point: ValueTable
    iterations: int
    residuals: list


class Equilibrium(NamedTuple):
    theta_star: np.ndarray
    phi_star: np.ndarray
    greedy_policy: np.ndarray


def enumerate_phi(n_states, n_actions):
    """Every deterministic map state -> action, in lexicographic order."""
    return np.array(list(itertools.product(range(n_actions), repeat=n_states)), dtype=np.int64)


def _table(f, shape):
    if isinstance(f, ValueTable):
        values = f.values
    else:
        values = np.asarray(f, dtype=np.float64)
        if not np.all(np.isfinite(values)):
            raise InvalidValueError("value table holds non-finite entries")
    if values.shape != shape:
        raise ShapeError(f"value table must be {shape}, got {values.shape}")
    return values


# ---------------------------------------
# Operators
# ---------------------------------------
def bellman_apply(f, mdp):
    """(T f)(s, a) = R(s, a) + gamma * sum_s' P(s'|s, a) max_a' f(s', a')."""
    values = _table(f, mdp.reward.shape)
    best_next = values.max(axis=1)
    return ValueTable(mdp.reward + mdp.gamma * (mdp.transition @ best_next))


def _backup(values, g):
    mdp = g.base
    n_states = mdp.n_states

    # follower continuation per phi: (n_phi, S, A)
    phi_values = values[np.arange(n_states)[None, :], g.phi_grid]
    continuation = g.gamma * np.einsum('sat,jt->jsa', mdp.transition, phi_values)

    if g.mode == 'maxmin':
        follower_pick = np.argmin(continuation, axis=0)
    else:
        follower_pick = np.argmax(continuation, axis=0)
    inner = np.take_along_axis(continuation, follower_pick[None], axis=0)[0]

    # leader over theta: (n_theta, S, A)
    leader = (mdp.reward[None, :, :]
              - g.lambda_cost * g.cost.T[:, :, None]
              + inner[None, :, :])
    leader_pick = np.argmax(leader, axis=0)
    out = np.take_along_axis(leader, leader_pick[None], axis=0)[0]
    return out, leader_pick, follower_pick


def stackelberg_bellman_apply(f, g):
    """
    One Stackelberg-Bellman backup.

    Returns the new table plus the selected theta / phi grid indices
    per (s, a); ties go to the lowest index.
    """
    values = _table(f, g.shape)
    out, theta_pick, phi_pick = _backup(values, g)
    return StackelbergBackup(ValueTable(out), theta_pick, phi_pick)


def _iterate(apply, start, shape, gamma, tol, max_iters):
    if not tol > 0:
        raise ConfigError('tol', "must be > 0")
    if np.isscalar(start):
        current = np.full(shape, float(start))
    else:
        current = _table(start, shape)

    residuals = []
    for iteration in range(1, max_iters + 1):
        nxt = apply(current)
        residual = sup_norm(nxt - current)
        residuals.append(residual)
        if residual < tol:
            logger.debug("value iteration converged in %d iterations (gamma=%s)", iteration, gamma)
            return ValueIterationResult(ValueTable(current), iteration, residuals)
        current = nxt
    raise NonConvergenceError(max_iters, residuals[-1] if residuals else float('inf'))


def value_iteration(g, tol=TABULAR_TOL, max_iters=TABULAR_MAX_ITERS, start=0.0):
    """Iterate T_S until the sup-norm residual drops below tol."""
    return _iterate(lambda v: _backup(v, g)[0], start, g.shape, g.gamma, tol, max_iters)


def bellman_value_iteration(mdp, tol=TABULAR_TOL, max_iters=TABULAR_MAX_ITERS, start=0.0):
    """Same loop for the plain Bellman operator."""
    return _iterate(lambda v: bellman_apply(v, mdp).values, start,
                    mdp.reward.shape, mdp.gamma, tol, max_iters)


def contraction_ratio(g, f1, f2):
    """||T_S f1 - T_S f2||_inf / ||f1 - f2||_inf."""
    a = _table(f1, g.shape)
    b = _table(f2, g.shape)
    denominator = sup_norm(a - b)
    if denominator == 0.0:
        raise UndefinedRatioError("contraction ratio of identical value tables")
    return sup_norm(_backup(a, g)[0] - _backup(b, g)[0]) / denominator


def extract_equilibrium(g, f_star, tol=TABULAR_TOL):
    """
    Arg-selections of the max-min at a fixed point plus the greedy policy.

    The input must satisfy ||T_S f - f|| <= STALE_FACTOR * tol.
    """
    values = _table(f_star, g.shape)
    out, theta_pick, phi_pick = _backup(values, g)
    residual = sup_norm(out - values)
    if residual > STALE_FACTOR * tol:
        raise StaleInputError(f"not a fixed point: residual {residual:.3e} > {STALE_FACTOR * tol:.1e}")
    greedy = np.argmax(values, axis=1)
    return Equilibrium(theta_pick, phi_pick, greedy)


# ---------------------------------------
# Random instances for property trials
# ---------------------------------------
def random_mdp(rng, n_states, n_actions, gamma):
    transition = rng.random((n_states, n_actions, n_states)) + 1e-3
    transition /= transition.sum(axis=2, keepdims=True)
    reward = rng.uniform(-1.0, 1.0, size=(n_states, n_actions))
    return TabularMdp(transition, reward, gamma, r_max=1.0)


def random_game(rng, n_states, n_actions, n_theta, gamma, lambda_cost=1.0, phi='all',
                n_phi=None, mode='maxmin'):
    """
    Random game with dense transitions, rewards in [-1, 1], costs in [0, 1].

    phi='all' enumerates every map; phi='sample' draws n_phi random maps.
    """
    mdp = random_mdp(rng, n_states, n_actions, gamma)
    if phi == 'all':
        phi_grid = enumerate_phi(n_states, n_actions)
    else:
        phi_grid = rng.integers(0, n_actions, size=(n_phi or n_actions, n_states))
    cost = rng.random((n_states, n_theta))
    return TabularGameMdp(mdp, tuple(range(n_theta)), phi_grid, cost, lambda_cost, mode)
