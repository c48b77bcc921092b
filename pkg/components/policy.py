"""
Follower module: tanh MLP over perception features with a categorical
action head and a state-value head, plus the PPO loss pieces.
"""

import logging
from dataclasses import dataclass

import numpy as np

from config.settings import ARCHITECTURE_DEFAULTS, POLICY_HIDDEN_LAYERS
from components import autodiff as ad
from components.advantage import check_advantage_contract
from utils.errors import ConfigError

logger = logging.getLogger(__name__)

HIDDEN_GAIN = np.sqrt(2.0)
ACTION_GAIN = 0.01
VALUE_GAIN = 1.0


class PolicyNet:
    """feature_dim -> hidden (tanh) x2 -> {n_actions logits, 1 value}."""

    def __init__(self, feature_dim, n_actions, rng, hidden_units=ARCHITECTURE_DEFAULTS['hidden_units'],
                 hidden_layers=POLICY_HIDDEN_LAYERS):
        self.n_actions = n_actions
        self.params = {}
        width = feature_dim
        for k in range(hidden_layers):
            self._linear(f'hidden{k}', width, hidden_units, HIDDEN_GAIN, rng)
            width = hidden_units
        self.hidden_layers = hidden_layers
        self._linear('action_head', width, n_actions, ACTION_GAIN, rng)
        self._linear('value_head', width, 1, VALUE_GAIN, rng)

    def _linear(self, name, fan_in, fan_out, gain, rng):
        self.params[f'{name}.weight'] = ad.parameter(ad.orthogonal(rng, (fan_in, fan_out), gain),
                                                     f'{name}.weight')
        self.params[f'{name}.bias'] = ad.parameter(np.zeros(fan_out), f'{name}.bias')

    def parameters(self):
        return list(self.params.values())

    def forward(self, features):
        """Return (logits (B, A), values (B,))."""
        h = ad.as_tensor(features)
        for k in range(self.hidden_layers):
            h = ad.tanh(h @ self.params[f'hidden{k}.weight'] + self.params[f'hidden{k}.bias'])
        logits = h @ self.params['action_head.weight'] + self.params['action_head.bias']
        values = h @ self.params['value_head.weight'] + self.params['value_head.bias']
        return logits, values.reshape(values.shape[0])


@dataclass
class ActionDistribution:
    """Categorical distribution per batch row, parameterized by logits."""

    logits: ad.DiffTensor

    def probs(self):
        return ad.softmax(self.logits)

    def log_probs(self):
        return ad.log_softmax(self.logits)

    def log_prob(self, actions):
        return ad.gather(self.log_probs(), actions)

    def sample(self, rng):
        """Inverse-CDF draw, one uniform per row."""
        probs = self.probs().data
        cumulative = np.cumsum(probs, axis=-1)
        draws = rng.random(probs.shape[0])
        actions = (cumulative < draws[:, None]).sum(axis=-1)
        return np.minimum(actions, probs.shape[-1] - 1)

    def mode(self):
        return np.argmax(self.logits.data, axis=-1)


def _features_tensor(features):
    return features.features if hasattr(features, 'features') else ad.as_tensor(features)


def act(features, params, rng, greedy=False):
    """
    Sample (or pick greedily) one action per row.

    Returns numpy arrays (actions, log_probs, values); no graph is built.
    """
    with ad.no_grad():
        logits, values = params.forward(_features_tensor(features))
        dist = ActionDistribution(logits)
        actions = dist.mode() if greedy else dist.sample(rng)
        log_probs = dist.log_prob(actions).data
    return actions, log_probs, values.data


def entropy(dist):
    """Batch mean of -sum_a p_a log p_a."""
    per_row = -ad.tensor_sum(dist.probs() * dist.log_probs(), axis=-1)
    return ad.mean(per_row)


def ppo_ratio(new_log_prob, old_log_prob):
    return ad.exp(ad.as_tensor(new_log_prob) - ad.as_tensor(old_log_prob))


def clip_loss(ratio, advantage, epsilon):
    """mean(min(r * A, clip(r, 1 - eps, 1 + eps) * A))."""
    if not epsilon > 0:
        raise ConfigError('clip_epsilon', "must be > 0")
    ratio = ad.as_tensor(ratio)
    advantage = ad.as_tensor(advantage)
    unclipped = ratio * advantage
    clipped = ad.clip(ratio, 1.0 - epsilon, 1.0 + epsilon) * advantage
    return ad.mean(ad.minimum(unclipped, clipped))


def value_loss(values, returns):
    diff = ad.as_tensor(values) - ad.as_tensor(returns)
    return ad.mean(diff * diff)


@dataclass
class FollowerTerms:
    loss: ad.DiffTensor
    clip_loss: float
    value_loss: float
    entropy: float
    perception_cost: float


def follower_loss(minibatch, features, params, epsilon, value_coef, entropy_coef, weighted_cost):
    """
    -L_CLIP + value_coef * L_V - entropy_coef * H + C_theta

    `weighted_cost` is C_theta already scaled by lambda_c, the same value
    u_L penalizes. It enters as a plain number and only shifts the loss value.
    """
    check_advantage_contract(minibatch.advantage_mean, minibatch.advantage_std)

    logits, values = params.forward(_features_tensor(features))
    dist = ActionDistribution(logits)
    new_log_prob = dist.log_prob(minibatch.actions)
    ratio = ppo_ratio(new_log_prob, minibatch.old_log_probs)

    surrogate = clip_loss(ratio, minibatch.advantages, epsilon)
    v_loss = value_loss(values, minibatch.returns)
    ent = entropy(dist)
    cost = float(ad.as_tensor(weighted_cost).item())

    loss = -surrogate + v_loss * value_coef - ent * entropy_coef + cost
    return FollowerTerms(loss, surrogate.item(), v_loss.item(), ent.item(), cost)
