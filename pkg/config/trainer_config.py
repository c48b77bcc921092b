from dataclasses import dataclass, asdict, fields, replace

from config.settings import (
    PPO_DEFAULTS,
    RUN_DEFAULTS,
    ARCHITECTURE_DEFAULTS,
    ENVIRONMENT_DEFAULTS,
    MODES,
    ENV_IDS,
    UTILITY_ORDERS,
    BASELINE_TORSOS,
)
from utils.errors import ConfigError


# ---------------------------------------
# Trainer configuration
# ---------------------------------------
@dataclass(frozen=True)
class TrainerConfig:
    """
    Every hyperparameter of a training run.

    - Optimization values (rollout length ... max episode length)
    - Run settings (seed, mode, env id, output paths)
    - Architecture / environment sizes
    """

    # Optimization
    rollout_length: int = PPO_DEFAULTS['rollout_length']
    batch_size: int = PPO_DEFAULTS['batch_size']
    gamma: float = PPO_DEFAULTS['gamma']
    gae_lambda: float = PPO_DEFAULTS['gae_lambda']
    learning_rate: float = PPO_DEFAULTS['learning_rate']
    ppo_epochs: int = PPO_DEFAULTS['ppo_epochs']
    clip_epsilon: float = PPO_DEFAULTS['clip_epsilon']
    value_coef: float = PPO_DEFAULTS['value_coef']
    entropy_coef: float = PPO_DEFAULTS['entropy_coef']
    max_grad_norm: float = PPO_DEFAULTS['max_grad_norm']
    lambda_cost: float = PPO_DEFAULTS['lambda_cost']
    alpha_coop: float = PPO_DEFAULTS['alpha_coop']
    max_episode_length: int = PPO_DEFAULTS['max_episode_length']

    # Run
    total_timesteps: int = RUN_DEFAULTS['total_timesteps']
    seed: int = RUN_DEFAULTS['seed']
    mode: str = RUN_DEFAULTS['mode']
    env_id: str = RUN_DEFAULTS['env_id']
    output_dir: str = RUN_DEFAULTS['output_dir']
    checkpoint_every: int = RUN_DEFAULTS['checkpoint_every']
    utility_order: str = RUN_DEFAULTS['utility_order']
    baseline_torso: str = RUN_DEFAULTS['baseline_torso']
    debug: bool = RUN_DEFAULTS['debug']

    # Architecture
    attention_layers: int = ARCHITECTURE_DEFAULTS['attention_layers']
    feature_dim: int = ARCHITECTURE_DEFAULTS['feature_dim']
    hidden_units: int = ARCHITECTURE_DEFAULTS['hidden_units']
    frame_stack: int = ARCHITECTURE_DEFAULTS['frame_stack']

    # Environment
    grid_height: int = ENVIRONMENT_DEFAULTS['grid_height']
    grid_width: int = ENVIRONMENT_DEFAULTS['grid_width']
    spawn_every: int = ENVIRONMENT_DEFAULTS['spawn_every']
    max_objects: int = ENVIRONMENT_DEFAULTS['max_objects']
    chain_states: int = ENVIRONMENT_DEFAULTS['chain_states']

    def __post_init__(self):
        self.validate()

    def validate(self):
        """Raise ConfigError naming the first key that breaks its constraint."""

        positive_ints = [
            'rollout_length', 'batch_size', 'ppo_epochs', 'max_episode_length',
            'total_timesteps', 'feature_dim', 'hidden_units', 'frame_stack',
            'grid_height', 'grid_width', 'spawn_every',
        ]
        for key in positive_ints:
            if getattr(self, key) <= 0:
                raise ConfigError(key, "must be a positive integer")

        positive_floats = ['clip_epsilon', 'max_grad_norm']
        for key in positive_floats:
            if not getattr(self, key) > 0:
                raise ConfigError(key, "must be > 0")

        non_negative = ['learning_rate', 'value_coef', 'entropy_coef', 'lambda_cost',
                        'checkpoint_every', 'max_objects', 'seed']
        for key in non_negative:
            if getattr(self, key) < 0:
                raise ConfigError(key, "must be >= 0")

        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError('gamma', "must lie in [0, 1)")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ConfigError('gae_lambda', "must lie in [0, 1]")
        if not 0.0 <= self.alpha_coop <= 1.0:
            raise ConfigError('alpha_coop', "must lie in [0, 1]")
        if not 1 <= self.attention_layers <= 3:
            raise ConfigError('attention_layers', "must lie in [1, 3] (one block per conv stage)")
        if self.chain_states < 2:
            raise ConfigError('chain_states', "must be >= 2")

        choices = {
            'mode': MODES,
            'env_id': ENV_IDS,
            'utility_order': UTILITY_ORDERS,
            'baseline_torso': BASELINE_TORSOS,
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(key, f"must be one of {allowed}")

    @property
    def n_iterations(self):
        return self.total_timesteps // self.rollout_length

    def with_overrides(self, **overrides):
        """Copy with some fields replaced (validated again)."""
        unknown = set(overrides) - set(field_names())
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown key")
        return replace(self, **overrides)

    def to_dict(self):
        return asdict(self)


def field_names():
    return [f.name for f in fields(TrainerConfig)]


def field_types():
    """Map of key -> python type used to coerce text values."""
    defaults = TrainerConfig.__dataclass_fields__
    return {name: type(f.default) for name, f in defaults.items()}
