# ---------------------------------------
# PPO and Stackelberg hyperparameter defaults
# ---------------------------------------
# Every key here is a valid key of a config file; anything else is rejected.
PPO_DEFAULTS = {
    'rollout_length': 2048,
    'batch_size': 64,
    'gamma': 0.99,
    'gae_lambda': 0.95,
    'learning_rate': 1e-4,
    'ppo_epochs': 4,
    'clip_epsilon': 0.2,
    'value_coef': 0.5,
    'entropy_coef': 0.01,
    'max_grad_norm': 0.5,
    'lambda_cost': 1e-4,
    'alpha_coop': 0.7,
    'max_episode_length': 10000,
}

# Desk-scale budget instead of the full 1e7 steps
DEFAULT_TOTAL_TIMESTEPS = 200_000

# Artifact-level settings that sit next to the table values
RUN_DEFAULTS = {
    'total_timesteps': DEFAULT_TOTAL_TIMESTEPS,
    'seed': 0,
    'mode': 'sprig',
    'env_id': 'beam_catch',
    'output_dir': 'runs',
    'checkpoint_every': 0,
    'utility_order': 'algorithm',
    'baseline_torso': 'attention',
    'debug': False,
}

MODES = ['sprig', 'ppo_baseline']
ENV_IDS = ['beam_catch', 'chain']
UTILITY_ORDERS = ['algorithm', 'equation']
BASELINE_TORSOS = ['attention', 'conv']


# ---------------------------------------
# Network architecture defaults
# ---------------------------------------
ARCHITECTURE_DEFAULTS = {
    'attention_layers': 3,
    'feature_dim': 128,
    'hidden_units': 256,
    'frame_stack': 4,
}

CONV_CHANNELS = (16, 32, 32)
CONV_KERNELS = (5, 3, 3)
CONV_STRIDE = 2

# Hidden layers of the follower MLP
POLICY_HIDDEN_LAYERS = 2


# ---------------------------------------
# Environment defaults
# ---------------------------------------
ENVIRONMENT_DEFAULTS = {
    'grid_height': 12,
    'grid_width': 12,
    'spawn_every': 3,
    'max_objects': 4,
    'chain_states': 8,
}

BEAM_ACTIONS = ['left', 'stay', 'right']
CHAIN_ACTIONS = ['left', 'right']

AGENT_PIXEL = 1.0
OBJECT_PIXEL = 0.5

# Exhaustive solver limits
OPTIMAL_RETURN_MAX_CELLS = 256
OPTIMAL_RETURN_MAX_HORIZON = 64


# ---------------------------------------
# Numerics
# ---------------------------------------
TABULAR_TOL = 1e-10
TABULAR_MAX_ITERS = 100_000
STALE_FACTOR = 10.0
TRANSITION_ATOL = 1e-12

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

ADV_STD_GUARD = 1e-8
ADV_CONTRACT_TOL = 0.1

EPISODE_RETURN_WINDOW = 10


# ---------------------------------------
# File formats
# ---------------------------------------
CHECKPOINT_FORMAT_VERSION = 'sprig-ckpt-1'
PERCEPTION_PREFIX = 'perception.'
POLICY_PREFIX = 'policy.'

CONFIG_FILE_NAME = 'config.cfg'
METRICS_FILE_NAME = 'metrics.csv'
TIMING_FILE_NAME = 'timing.csv'
MANIFEST_FILE_NAME = 'manifest.json'
CHECKPOINT_FILE_NAME = 'final.npz'

# Canonical metrics column order (one row per iteration)
METRICS_COLUMNS = [
    'iteration', 'env_steps', 'mean_episode_return',
    'leader_utility', 'u_policy', 'raw_cost', 'weighted_cost',
    'clip_loss', 'value_loss', 'entropy',
    'leader_grad_norm', 'follower_grad_norm',
]

CURVE_COLUMNS = ['mode', 'step', 'mean_return', 'std_return', 'n_seeds']

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


# ---------------------------------------
# CLI exit codes
# ---------------------------------------
EXIT_CODES = {
    'ok': 0,
    'property_failure': 1,
    'config_error': 2,
    'runtime_abort': 3,
}

VERIFY_SUITES = ['tabular', 'gradients', 'gae', 'all']
VERIFY_MASTER_SEED = 20240601

APP_VERSION = "0.1.0"
