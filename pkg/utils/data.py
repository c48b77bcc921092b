# ---------------------------------------
# Import required libraries
# ---------------------------------------
import json
import logging
import os
import re

import numpy as np
import pandas as pd

# Application-level configuration:
# - METRICS_COLUMNS: canonical metrics column order used across the app
# - CHECKPOINT_FORMAT_VERSION: header written into every checkpoint
from config.settings import METRICS_COLUMNS, CURVE_COLUMNS, CHECKPOINT_FORMAT_VERSION
from config.trainer_config import TrainerConfig, field_names, field_types
from utils.errors import ConfigError, FormatError

logger = logging.getLogger(__name__)

_COMMENT = re.compile(r'(?:^|(?<=\s))#')


# ---------------------------------------
# Flat key = value documents
# ---------------------------------------
def read_key_values(text, source="<text>"):
    """
    Parses a flat `key = value` document.

    - '#' at line start or after whitespace starts a comment
    - blank lines are skipped
    - duplicate keys are rejected
    """
    values = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = _COMMENT.split(raw, maxsplit=1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise FormatError(f"{source}:{number}: expected 'key = value'")
        key, value = (part.strip() for part in line.split('=', 1))
        if key in values:
            raise ConfigError(key, f"duplicate key ({source}:{number})")
        values[key] = value
    return values


def _coerce(key, text, kind):
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in ('true', '1', 'yes'):
                return True
            if lowered in ('false', '0', 'no'):
                return False
            raise ValueError(text)
        if kind is int:
            number = float(text)
            if not number.is_integer():
                raise ValueError(text)
            return int(number)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(key, f"expected {kind.__name__}, got '{text}'") from None


# ---------------------------------------
# Trainer configuration files
# ---------------------------------------
def parse_config(path):
    """
    Reads a config file into a TrainerConfig.

    Unknown keys are rejected; missing keys keep their defaults.
    """
    with open(path) as handle:
        return config_from_text(handle.read(), source=str(path))


def config_from_text(text, source="<text>"):
    raw = read_key_values(text, source=source)
    known = field_types()
    parsed = {}
    for key, text in raw.items():
        if key not in known:
            raise ConfigError(key, "unknown key")
        parsed[key] = _coerce(key, text, known[key])
    return TrainerConfig(**parsed)


def _format_value(value):
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_config(config):
    """Every field in declaration order, one `key = value` per line."""
    values = config.to_dict()
    return ''.join(f"{key} = {_format_value(values[key])}\n" for key in field_names())


def save_config(config, path):
    with open(path, 'w') as handle:
        handle.write(serialize_config(config))


# ---------------------------------------
# Tabular game instance files
# ---------------------------------------
def _numbers(key, text, dtype=float):
    try:
        return np.array([dtype(t) for t in text.replace(',', ' ').split()])
    except ValueError:
        raise ConfigError(key, "expected a list of numbers") from None


def load_instance(path):
    """
    Reads a TabularGameMdp.

    Keys: n_states, n_actions, gamma, lambda_cost, theta_grid (count),
    transition (row-major, s-major), reward, cost, phi_grid ('all' or
    rows separated by ';'), optional mode and r_max.
    """
    from components.tabular_game import TabularMdp, TabularGameMdp, enumerate_phi

    with open(path) as handle:
        raw = read_key_values(handle.read(), source=str(path))

    required = ['n_states', 'n_actions', 'gamma', 'lambda_cost', 'theta_grid',
                'transition', 'reward', 'cost', 'phi_grid']
    allowed = set(required) | {'mode', 'r_max'}
    for key in raw:
        if key not in allowed:
            raise ConfigError(key, "unknown key")
    for key in required:
        if key not in raw:
            raise ConfigError(key, "missing")

    n_states = _coerce('n_states', raw['n_states'], int)
    n_actions = _coerce('n_actions', raw['n_actions'], int)
    n_theta = _coerce('theta_grid', raw['theta_grid'], int)
    if min(n_states, n_actions) < 1:
        raise ConfigError('n_states', "state and action counts must be positive")

    sizes = {
        'transition': (n_states, n_actions, n_states),
        'reward': (n_states, n_actions),
        'cost': (n_states, n_theta),
    }
    arrays = {}
    for key, shape in sizes.items():
        flat = _numbers(key, raw[key])
        if flat.size != int(np.prod(shape)):
            raise ConfigError(key, f"expected {int(np.prod(shape))} numbers, got {flat.size}")
        arrays[key] = flat.reshape(shape)

    if raw['phi_grid'].strip().lower() == 'all':
        phi_grid = enumerate_phi(n_states, n_actions)
    else:
        phi_grid = np.array([_numbers('phi_grid', row, int)
                             for row in raw['phi_grid'].split(';') if row.strip()])

    r_max = _coerce('r_max', raw['r_max'], float) if 'r_max' in raw else None
    mdp = TabularMdp(arrays['transition'], arrays['reward'], _coerce('gamma', raw['gamma'], float), r_max)
    return TabularGameMdp(
        base=mdp,
        theta_grid=tuple(range(n_theta)),
        phi_grid=phi_grid,
        cost=arrays['cost'],
        lambda_cost=_coerce('lambda_cost', raw['lambda_cost'], float),
        mode=raw.get('mode', 'maxmin'),
    )


def dump_instance(game, path):
    """Writes a TabularGameMdp in the format load_instance reads."""
    mdp = game.base

    def flat(array):
        return ' '.join(repr(float(v)) for v in np.ravel(array))

    lines = [
        f"n_states = {mdp.n_states}",
        f"n_actions = {mdp.n_actions}",
        f"gamma = {mdp.gamma!r}",
        f"lambda_cost = {float(game.lambda_cost)!r}",
        f"theta_grid = {len(game.theta_grid)}",
        f"mode = {game.mode}",
        f"r_max = {float(mdp.r_max)!r}",
        f"transition = {flat(mdp.transition)}",
        f"reward = {flat(mdp.reward)}",
        f"cost = {flat(game.cost)}",
        "phi_grid = " + '; '.join(' '.join(str(int(a)) for a in row) for row in game.phi_grid),
    ]
    with open(path, 'w') as handle:
        handle.write('\n'.join(lines) + '\n')


# ---------------------------------------
# Metrics CSVs
# ---------------------------------------
def validate_columns(df, required=METRICS_COLUMNS):
    """
    Checks whether a metrics DataFrame carries every required column.

    Returns:
    - whether all required columns exist
    - list of missing columns
    """
    missing = [col for col in required if col not in df.columns]
    return len(missing) == 0, missing


def standardize_columns(df, columns=METRICS_COLUMNS):
    """
    Converts a DataFrame into the canonical column layout.

    - Adds missing columns as NaN
    - Drops extra columns
    - Ensures consistent column order
    """
    df = df.copy()
    for col in columns:
        if col not in df.columns:
            df[col] = np.nan
    return df[columns]


def append_metrics(path, row):
    """
    Appends one iteration row; the header is written with the first row.

    Floats are written shortest-round-trip, so reruns are byte-identical.
    """
    frame = standardize_columns(pd.DataFrame([row]))
    write_header = not os.path.exists(path) or os.path.getsize(path) == 0
    frame.to_csv(path, mode='a', header=write_header, index=False)


def load_metrics(path):
    """
    Loads a metrics CSV into the canonical layout.

    Missing columns are reported and filled with NaN.
    """
    try:
        df = pd.read_csv(path)
    except pd.errors.EmptyDataError:
        return pd.DataFrame(columns=METRICS_COLUMNS)

    is_valid, missing = validate_columns(df)
    if not is_valid:
        logger.warning("%s: missing metrics columns %s", path, ', '.join(missing))
    return standardize_columns(df)


def append_timing(path, iteration, wall_time):
    frame = pd.DataFrame([{'iteration': iteration, 'wall_time': wall_time}])
    write_header = not os.path.exists(path) or os.path.getsize(path) == 0
    frame.to_csv(path, mode='a', header=write_header, index=False)


def save_curves(df, path):
    standardize_columns(df, CURVE_COLUMNS).to_csv(path, index=False)


# ---------------------------------------
# Checkpoints
# ---------------------------------------
def save_checkpoint(path, named_arrays, config_text):
    """
    Writes a .npz file: format header, config snapshot and one array
    per parameter name. Arrays round-trip bit-exactly.
    """
    payload = {name: np.asarray(array, dtype=np.float64) for name, array in named_arrays.items()}
    for reserved in ('__format_version__', '__config__'):
        if reserved in payload:
            raise FormatError(f"parameter name '{reserved}' is reserved")
    payload['__format_version__'] = np.array(CHECKPOINT_FORMAT_VERSION)
    payload['__config__'] = np.array(config_text)

    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'wb') as handle:
        np.savez(handle, **payload)


def load_checkpoint(path):
    """Returns (named arrays, config text); rejects other format versions."""
    try:
        with np.load(path, allow_pickle=False) as archive:
            names = list(archive.files)
            if '__format_version__' not in names:
                raise FormatError(f"{path}: missing format header")
            version = str(archive['__format_version__'])
            if version != CHECKPOINT_FORMAT_VERSION:
                raise FormatError(
                    f"{path}: checkpoint version '{version}', expected '{CHECKPOINT_FORMAT_VERSION}'"
                )
            config_text = str(archive['__config__'])
            arrays = {name: archive[name] for name in names if not name.startswith('__')}
    except FormatError:
        raise
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: unreadable checkpoint ({exc})") from exc
    return arrays, config_text


# ---------------------------------------
# Run manifests
# ---------------------------------------
def save_manifest(path, manifest):
    with open(path, 'w') as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)
        handle.write('\n')


def load_manifest(path):
    with open(path) as handle:
        return json.load(handle)
