"""
Leader module: hierarchical spatio-temporal attention over stacked frames.

Three stride-2 conv stages; after each of the first K stages a single-head
self-attention block mixes the flattened spatial positions. Temporal mixing
happens through the frame-stack channels of the first conv.
"""

import logging
from dataclasses import dataclass

import numpy as np

from config.settings import (
    ARCHITECTURE_DEFAULTS,
    CONV_CHANNELS,
    CONV_KERNELS,
    CONV_STRIDE,
    UTILITY_ORDERS,
)
from components import autodiff as ad
from utils.errors import ConfigError, ShapeError, UsageError

logger = logging.getLogger(__name__)

RELU_GAIN = np.sqrt(2.0)


@dataclass
class FeatureBatch:
    """features: (batch, feature_dim) tensor; attention_record: one A_k per block."""

    features: ad.DiffTensor
    attention_record: list


def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


# ---------------------------------------
# Plain conv torso
# ---------------------------------------
class ConvStack:
    """Three conv stages + linear projection; no attention blocks."""

    attention_layers = 0

    def __init__(self, observation_shape, rng, feature_dim=ARCHITECTURE_DEFAULTS['feature_dim'],
                 channels=CONV_CHANNELS, kernels=CONV_KERNELS, stride=CONV_STRIDE):
        self.observation_shape = tuple(observation_shape)
        self.feature_dim = feature_dim
        self.stride = stride
        self.kernels = tuple(kernels)
        self.params = {}
        self.last_attention = []

        in_channels, height, width = self.observation_shape
        for k, (out_channels, kernel) in enumerate(zip(channels, kernels)):
            self.params[f'conv{k}.weight'] = ad.parameter(
                ad.orthogonal(rng, (out_channels, in_channels, kernel, kernel), RELU_GAIN),
                f'conv{k}.weight')
            self.params[f'conv{k}.bias'] = ad.parameter(np.zeros(out_channels), f'conv{k}.bias')
            if k < self.attention_layers:
                self._add_attention(k, out_channels, rng)
            padding = kernel // 2
            height = conv_output_size(height, kernel, stride, padding)
            width = conv_output_size(width, kernel, stride, padding)
            if height < 1 or width < 1:
                raise ShapeError(f"observation {observation_shape} too small for conv stage {k}")
            in_channels = out_channels

        flat = in_channels * height * width
        self.params['proj.weight'] = ad.parameter(ad.orthogonal(rng, (flat, feature_dim), RELU_GAIN),
                                                  'proj.weight')
        self.params['proj.bias'] = ad.parameter(np.zeros(feature_dim), 'proj.bias')

    def _add_attention(self, k, channels, rng):
        pass

    def _attend(self, k, x):
        return x, None

    def parameters(self):
        return list(self.params.values())

    def forward(self, observations):
        obs = np.asarray(observations, dtype=np.float64)
        if obs.ndim != 4 or obs.shape[1:] != self.observation_shape:
            raise ShapeError(
                f"observations must be (batch, {', '.join(map(str, self.observation_shape))}), "
                f"got {obs.shape}"
            )

        x = ad.DiffTensor(obs)
        record = []
        for k, kernel in enumerate(self.kernels):
            x = ad.relu(ad.conv2d(x, self.params[f'conv{k}.weight'], self.params[f'conv{k}.bias'],
                                  stride=self.stride, padding=kernel // 2))
            x, attention = self._attend(k, x)
            if attention is not None:
                record.append(attention)

        flat = x.reshape(x.shape[0], -1)
        features = ad.relu(flat @ self.params['proj.weight'] + self.params['proj.bias'])
        self.last_attention = [a.data for a in record]
        return FeatureBatch(features, record)


# ---------------------------------------
# Attention torso
# ---------------------------------------
class AttentionStack(ConvStack):
    """
    ConvStack with a self-attention block after each of the first K conv stages.

    Attention rows are softmax distributions over spatial positions;
    `last_attention` keeps the maps of the latest forward pass.
    """

    def __init__(self, observation_shape, rng, attention_layers=ARCHITECTURE_DEFAULTS['attention_layers'],
                 feature_dim=ARCHITECTURE_DEFAULTS['feature_dim'], uniform_attention_init=False, **kwargs):
        if not 1 <= attention_layers <= len(kwargs.get('channels', CONV_CHANNELS)):
            raise ConfigError('attention_layers', "must lie in [1, number of conv stages]")
        self.attention_layers = attention_layers
        self.uniform_attention_init = uniform_attention_init
        super().__init__(observation_shape, rng, feature_dim=feature_dim, **kwargs)

    def _add_attention(self, k, channels, rng):
        for role in ('query', 'key', 'value'):
            init = ad.orthogonal(rng, (channels, channels))
            if role == 'query' and self.uniform_attention_init:
                init = np.zeros((channels, channels))
            self.params[f'attn{k}.{role}'] = ad.parameter(init, f'attn{k}.{role}')

    def _attend(self, k, x):
        if k >= self.attention_layers:
            return x, None
        batch, channels, height, width = x.shape
        tokens = x.reshape(batch, channels, height * width).transpose(0, 2, 1)  # (B, N, C)
        query = tokens @ self.params[f'attn{k}.query']
        key = tokens @ self.params[f'attn{k}.key']
        value = tokens @ self.params[f'attn{k}.value']
        logits = (query @ key.transpose(0, 2, 1)) * (1.0 / np.sqrt(channels))
        attention = ad.softmax(logits)  # (B, N, N)
        mixed = tokens + attention @ value
        out = mixed.transpose(0, 2, 1).reshape(batch, channels, height, width)
        return out, attention


def extract_features(observations, params):
    """Map a stacked-frame batch to features and attention maps."""
    return params.forward(observations)


# ---------------------------------------
# Perception cost + leader utility
# ---------------------------------------
def perception_cost(attention_record, lambda_c):
    """
    raw = (1/K) * sum_k ||A_k||_1 / N_k   (N_k = entry count of A_k, batch included)
    weighted = lambda_c * raw

    Both are returned as tensors so the cost stays differentiable.
    """
    if not attention_record:
        raise UsageError("perception cost needs at least one attention map")
    total = None
    for attention in attention_record:
        layer = ad.mean(ad.absolute(attention))
        total = layer if total is None else total + layer
    raw = total * (1.0 / len(attention_record))
    return raw, raw * float(lambda_c)


def leader_utility(u_policy, raw_cost, alpha_coop, lambda_c=1.0, order='algorithm'):
    """
    order='algorithm':  alpha * (-lambda_c * raw_cost) + (1 - alpha) * u_policy
    order='equation':   alpha * u_policy - (1 - alpha) * lambda_c * raw_cost
    """
    if not 0.0 <= alpha_coop <= 1.0:
        raise ConfigError('alpha_coop', "must lie in [0, 1]")
    if order not in UTILITY_ORDERS:
        raise ConfigError('utility_order', f"must be one of {UTILITY_ORDERS}")
    u_policy = ad.as_tensor(u_policy)
    weighted = ad.as_tensor(raw_cost) * float(lambda_c)
    if order == 'algorithm':
        return (-weighted) * alpha_coop + u_policy * (1.0 - alpha_coop)
    return u_policy * alpha_coop - weighted * (1.0 - alpha_coop)


def build_torso(kind, observation_shape, rng, attention_layers, feature_dim):
    if kind == 'conv':
        return ConvStack(observation_shape, rng, feature_dim=feature_dim)
    return AttentionStack(observation_shape, rng, attention_layers=attention_layers,
                          feature_dim=feature_dim)
