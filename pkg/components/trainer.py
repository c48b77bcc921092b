"""
Training loop: rollouts, GAE, then per minibatch a leader (perception)
step followed by a follower (policy) step. The ppo_baseline mode replaces
the two stages with one joint update of the follower loss.
"""

import logging
import os
import time
from collections import deque
from dataclasses import dataclass, field, asdict

import numpy as np

from config.settings import (
    EPISODE_RETURN_WINDOW,
    PERCEPTION_PREFIX,
    POLICY_PREFIX,
    CONFIG_FILE_NAME,
    METRICS_FILE_NAME,
    TIMING_FILE_NAME,
    CHECKPOINT_FILE_NAME,
)
from components import autodiff as ad
from components.advantage import (
    Trajectory,
    compute_gae,
    normalize,
    check_advantage_contract,
    iterate_minibatches,
)
from components.environments import make_env, run_episode
from components.perception import AttentionStack, build_torso, perception_cost, leader_utility
from components.policy import PolicyNet, ActionDistribution, act, follower_loss
from utils.data import (
    serialize_config,
    config_from_text,
    append_metrics,
    append_timing,
    save_checkpoint,
    load_checkpoint,
)
from utils.errors import (
    ConfigError,
    ContractViolationError,
    FormatError,
    NumericError,
    TrainingAbortedError,
)
from utils.helpers import make_rngs, checksum

logger = logging.getLogger(__name__)

RNG_STREAMS = ['init', 'env', 'policy', 'minibatch']


# ---------------------------------------
# Agent
# ---------------------------------------
@dataclass
class Agent:
    """Perception torso (theta) and policy net (phi)."""

    perception: object
    policy: PolicyNet

    @classmethod
    def build(cls, config, observation_shape, n_actions, rng):
        if config.mode == 'sprig':
            perception = AttentionStack(observation_shape, rng, attention_layers=config.attention_layers,
                                        feature_dim=config.feature_dim)
        else:
            perception = build_torso(config.baseline_torso, observation_shape, rng,
                                     config.attention_layers, config.feature_dim)
        policy = PolicyNet(config.feature_dim, n_actions, rng, hidden_units=config.hidden_units)
        return cls(perception, policy)

    @property
    def theta(self):
        return self.perception.parameters()

    @property
    def phi(self):
        return self.policy.parameters()

    def named_parameters(self):
        named = {PERCEPTION_PREFIX + name: p for name, p in self.perception.params.items()}
        named.update({POLICY_PREFIX + name: p for name, p in self.policy.params.items()})
        return named

    def state_arrays(self):
        return {name: p.data for name, p in self.named_parameters().items()}

    def load_arrays(self, arrays):
        """Replace every parameter; names and shapes must match exactly."""
        named = self.named_parameters()
        if set(arrays) != set(named):
            missing = sorted(set(named) - set(arrays))
            extra = sorted(set(arrays) - set(named))
            raise FormatError(f"checkpoint parameters differ (missing {missing}, unexpected {extra})")
        for name, p in named.items():
            if arrays[name].shape != p.shape:
                raise FormatError(f"{name}: shape {arrays[name].shape}, expected {p.shape}")
            p.data = np.array(arrays[name], dtype=np.float64)


# ---------------------------------------
# Rollouts
# ---------------------------------------
@dataclass
class EpisodeCarry:
    """Environment progress that survives from one rollout to the next."""

    observation: np.ndarray = None
    episode_return: float = 0.0
    completed: list = field(default_factory=list)


def _reset(env, carry, rng):
    carry.observation = env.reset(int(rng.integers(2 ** 31)))
    carry.episode_return = 0.0


def _value_of(perception, policy, observation):
    with ad.no_grad():
        _, values = policy.forward(perception.forward(observation[None]).features)
    return float(values.data[0])


def collect_rollout(env, perception, policy, length, rng, carry=None, env_rng=None):
    """
    Exactly `length` transitions under the current policy.

    Episodes reset automatically (seeded from `env_rng`); `values` gets the
    bootstrap value of the state after the last step appended.
    """
    carry = carry if carry is not None else EpisodeCarry()
    env_rng = env_rng if env_rng is not None else rng
    if carry.observation is None:
        _reset(env, carry, env_rng)

    observations = np.zeros((length,) + tuple(env.observation_shape))
    actions = np.zeros(length, dtype=np.int64)
    rewards = np.zeros(length)
    values = np.zeros(length + 1)
    log_probs = np.zeros(length)
    dones = np.zeros(length, dtype=bool)
    finished = []

    for t in range(length):
        observations[t] = carry.observation
        with ad.no_grad():
            features = perception.forward(carry.observation[None])
        action, log_prob, value = act(features, policy, rng)
        actions[t], log_probs[t], values[t] = action[0], log_prob[0], value[0]

        carry.observation, rewards[t], dones[t] = env.step(int(action[0]))
        carry.episode_return += rewards[t]
        if dones[t]:
            finished.append(carry.episode_return)
            _reset(env, carry, env_rng)

    values[length] = _value_of(perception, policy, carry.observation)
    carry.completed.extend(finished)
    return Trajectory(observations, actions, rewards, values, log_probs, dones, finished)


# ---------------------------------------
# Update stages
# ---------------------------------------
def _apply_gradients(params, loss, optimizer, config):
    """backward -> pre-clip norm -> clip -> Adam. Returns the pre-clip norm."""
    ad.zero_grad(params)
    ad.backward(loss)
    norm = ad.global_grad_norm(params)
    ad.clip_global_norm(params, config.max_grad_norm)
    ad.adam_step(params, optimizer, config.learning_rate)
    return norm


def _assert_unchanged(params, before, stage):
    if checksum([p.data for p in params]) != before:
        raise ContractViolationError(f"{stage} stage changed parameters it does not own")
    logger.debug("%s stage left %d foreign tensors unchanged", stage, len(params))


def leader_objective(minibatch, perception, policy, config):
    """
    u_L for one minibatch, computed with phi frozen.

    Returns (u_L, u_policy, raw_cost, weighted_cost) as tensors.
    """
    with ad.frozen(policy.parameters()):
        features = perception.forward(minibatch.observations)
        raw, weighted = perception_cost(features.attention_record, config.lambda_cost)
        logits, _ = policy.forward(features.features)
        log_prob = ActionDistribution(logits).log_prob(minibatch.actions)
        u_policy = ad.mean(log_prob * ad.as_tensor(minibatch.advantages))
        u_leader = leader_utility(u_policy, raw, config.alpha_coop, config.lambda_cost, config.utility_order)
    return u_leader, u_policy, raw, weighted


def leader_stage(minibatch, perception, policy, config, optimizer=None):
    """Ascend u_L on theta; phi is left untouched."""
    check_advantage_contract(minibatch.advantage_mean, minibatch.advantage_std)
    theta = perception.parameters()
    optimizer = optimizer or ad.AdamState.for_params(theta)
    before = checksum([p.data for p in policy.parameters()]) if config.debug else None

    with ad.frozen(policy.parameters()):
        u_leader, u_policy, raw, weighted = leader_objective(minibatch, perception, policy, config)
        norm = _apply_gradients(theta, -u_leader, optimizer, config)

    if before is not None:
        _assert_unchanged(policy.parameters(), before, 'leader')
    return {
        'leader_utility': u_leader.item(),
        'u_policy': u_policy.item(),
        'raw_cost': raw.item(),
        'weighted_cost': weighted.item(),
        'leader_grad_norm': norm,
    }


def follower_stage(minibatch, perception, policy, config, optimizer=None):
    """Descend the follower loss on phi over features of the updated theta."""
    phi = policy.parameters()
    optimizer = optimizer or ad.AdamState.for_params(phi)
    before = checksum([p.data for p in perception.parameters()]) if config.debug else None

    with ad.frozen(perception.parameters()):
        features = perception.forward(minibatch.observations)
        _, weighted = perception_cost(features.attention_record, config.lambda_cost)
        terms = follower_loss(minibatch, features, policy, config.clip_epsilon, config.value_coef,
                              config.entropy_coef, weighted.item())
        norm = _apply_gradients(phi, terms.loss, optimizer, config)

    if before is not None:
        _assert_unchanged(perception.parameters(), before, 'follower')
    return {
        'clip_loss': terms.clip_loss,
        'value_loss': terms.value_loss,
        'entropy': terms.entropy,
        'follower_grad_norm': norm,
    }


def baseline_loss(minibatch, perception, policy, config):
    """Plain PPO loss through perception and policy (no perception cost)."""
    features = perception.forward(minibatch.observations)
    terms = follower_loss(minibatch, features, policy, config.clip_epsilon, config.value_coef,
                          config.entropy_coef, 0.0)
    return terms, features


def joint_stage(minibatch, perception, policy, config, optimizer=None):
    """ppo_baseline update: one clip and one Adam step over theta and phi together."""
    params = perception.parameters() + policy.parameters()
    optimizer = optimizer or ad.AdamState.for_params(params)

    terms, features = baseline_loss(minibatch, perception, policy, config)
    norm = _apply_gradients(params, terms.loss, optimizer, config)

    raw_cost = weighted_cost = 0.0
    if features.attention_record:
        raw, weighted = perception_cost(features.attention_record, config.lambda_cost)
        raw_cost, weighted_cost = raw.item(), weighted.item()
    return {
        'leader_utility': float('nan'),
        'u_policy': float('nan'),
        'raw_cost': raw_cost,
        'weighted_cost': weighted_cost,
        'leader_grad_norm': float('nan'),
        'clip_loss': terms.clip_loss,
        'value_loss': terms.value_loss,
        'entropy': terms.entropy,
        'follower_grad_norm': norm,
    }


# ---------------------------------------
# Iteration records
# ---------------------------------------
@dataclass
class IterationMetrics:
    iteration: int
    env_steps: int
    mean_episode_return: float
    leader_utility: float
    u_policy: float
    raw_cost: float
    weighted_cost: float
    clip_loss: float
    value_loss: float
    entropy: float
    leader_grad_norm: float
    follower_grad_norm: float
    wall_time: float = 0.0

    def as_row(self):
        """Metrics CSV row; wall time goes to the separate timing file."""
        row = asdict(self)
        row.pop('wall_time')
        return row


@dataclass
class TrainingResult:
    metrics: list
    agent: Agent
    checkpoint_path: str = None
    stage_passes: dict = field(default_factory=dict)


def _averaged(deltas, key):
    values = [d[key] for d in deltas if key in d]
    return float(np.mean(values)) if values else float('nan')


def _run_stage(iteration, stage, fn, *args):
    try:
        return fn(*args)
    except NumericError as exc:
        raise TrainingAbortedError(iteration, stage, str(exc)) from exc


# ---------------------------------------
# Training
# ---------------------------------------
def train(config, run_dir=None):
    """
    total_timesteps // rollout_length iterations of collect -> GAE ->
    ppo_epochs x minibatch updates.

    With a run directory: config snapshot, metrics.csv, timing.csv,
    periodic checkpoints and final.npz are written there.
    """
    n_iterations = config.n_iterations
    if n_iterations < 1:
        raise ConfigError('total_timesteps', "must be at least rollout_length")

    rngs = make_rngs(config.seed, RNG_STREAMS)
    env = make_env(config)
    agent = Agent.build(config, env.observation_shape, env.n_actions, rngs['init'])
    config_text = serialize_config(config)

    if config.mode == 'sprig':
        optimizers = {
            'leader': ad.AdamState.for_params(agent.theta),
            'follower': ad.AdamState.for_params(agent.phi),
        }
    else:
        optimizers = {'joint': ad.AdamState.for_params(agent.theta + agent.phi)}

    metrics_path = timing_path = None
    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        with open(os.path.join(run_dir, CONFIG_FILE_NAME), 'w') as handle:
            handle.write(config_text)
        metrics_path = os.path.join(run_dir, METRICS_FILE_NAME)
        timing_path = os.path.join(run_dir, TIMING_FILE_NAME)
        for path in (metrics_path, timing_path):
            if os.path.exists(path):
                os.remove(path)

    logger.info("training %s on %s: %d iterations, seed %d",
                config.mode, config.env_id, n_iterations, config.seed)

    carry = EpisodeCarry()
    recent = deque(maxlen=EPISODE_RETURN_WINDOW)
    passes = {'leader': 0, 'follower': 0}
    history = []
    start = time.perf_counter()

    for iteration in range(n_iterations):
        traj = _run_stage(iteration, 'rollout', collect_rollout, env, agent.perception, agent.policy,
                          config.rollout_length, rngs['policy'], carry, rngs['env'])
        recent.extend(traj.episode_returns)

        batch = normalize(compute_gae(traj, config.gamma, config.gae_lambda))
        check_advantage_contract(*batch.stats)

        deltas = []
        for _ in range(config.ppo_epochs):
            for minibatch in iterate_minibatches(traj, batch, config.batch_size, rngs['minibatch']):
                if config.mode == 'sprig':
                    delta = _run_stage(iteration, 'leader', leader_stage, minibatch, agent.perception,
                                       agent.policy, config, optimizers['leader'])
                    delta.update(_run_stage(iteration, 'follower', follower_stage, minibatch,
                                            agent.perception, agent.policy, config, optimizers['follower']))
                    passes['leader'] += 1
                else:
                    delta = _run_stage(iteration, 'joint', joint_stage, minibatch, agent.perception,
                                       agent.policy, config, optimizers['joint'])
                passes['follower'] += 1
                deltas.append(delta)

        record = IterationMetrics(
            iteration=iteration,
            env_steps=(iteration + 1) * config.rollout_length,
            mean_episode_return=float(np.mean(recent)) if recent else float('nan'),
            wall_time=time.perf_counter() - start,
            **{key: _averaged(deltas, key) for key in (
                'leader_utility', 'u_policy', 'raw_cost', 'weighted_cost', 'clip_loss',
                'value_loss', 'entropy', 'leader_grad_norm', 'follower_grad_norm')},
        )
        history.append(record)
        logger.info("iter %d steps %d return %.3f u_L %.4f cost %.4f clip %.4f value %.4f entropy %.4f",
                    iteration, record.env_steps, record.mean_episode_return, record.leader_utility,
                    record.raw_cost, record.clip_loss, record.value_loss, record.entropy)

        if metrics_path is not None:
            append_metrics(metrics_path, record.as_row())
            append_timing(timing_path, iteration, record.wall_time)
            if config.checkpoint_every and (iteration + 1) % config.checkpoint_every == 0:
                save_checkpoint(os.path.join(run_dir, f"iter_{iteration + 1:06d}.npz"),
                                agent.state_arrays(), config_text)
                logger.debug("checkpoint after iteration %d", iteration + 1)

    checkpoint_path = None
    if run_dir is not None:
        checkpoint_path = os.path.join(run_dir, CHECKPOINT_FILE_NAME)
        save_checkpoint(checkpoint_path, agent.state_arrays(), config_text)
        logger.info("wrote %s", checkpoint_path)

    return TrainingResult(history, agent, checkpoint_path, passes)


# ---------------------------------------
# Evaluation
# ---------------------------------------
def load_agent(checkpoint_path, observation_shape=None, n_actions=None):
    """Rebuild the agent stored in a checkpoint. Returns (agent, config)."""
    arrays, config_text = load_checkpoint(checkpoint_path)
    config = config_from_text(config_text)
    if observation_shape is None or n_actions is None:
        env = make_env(config)
        observation_shape, n_actions = env.observation_shape, env.n_actions
    agent = Agent.build(config, observation_shape, n_actions, np.random.default_rng(0))
    agent.load_arrays(arrays)
    return agent, config


def evaluate(checkpoint_path, env, episodes, rng):
    """Greedy-action returns of a stored agent: (mean, std)."""
    agent, _ = load_agent(checkpoint_path, env.observation_shape, env.n_actions)

    def greedy(observation):
        with ad.no_grad():
            features = agent.perception.forward(observation[None])
        actions, _, _ = act(features, agent.policy, rng, greedy=True)
        return int(actions[0])

    returns = np.array([run_episode(env, greedy, int(rng.integers(2 ** 31))) for _ in range(episodes)])
    return float(returns.mean()), float(returns.std())
