import logging

import numpy as np
import pandas as pd

from config.settings import CURVE_COLUMNS
from utils.errors import AlignmentError

logger = logging.getLogger(__name__)


def generate_return_curve(frames):
    """
    Generate return-curve data for one mode:
    - step grid (env steps shared by every seed)
    - mean episode return per step across seeds
    - population std across seeds (0 for a single seed)
    """

    # Handle empty input
    if not frames:
        raise AlignmentError("no metrics series given")

    # Every seed must report the same step grid
    grid = None
    for index, df in enumerate(frames):
        if df.empty:
            raise AlignmentError(f"metrics series {index} is empty")
        steps = df['env_steps'].to_numpy()
        if grid is None:
            grid = steps
        elif len(steps) != len(grid) or not np.array_equal(steps, grid):
            raise AlignmentError(
                f"metrics series {index} has a different step grid "
                f"({len(steps)} rows vs {len(grid)})"
            )

    # One column per seed, one row per step
    returns = np.stack([df['mean_episode_return'].to_numpy(dtype=np.float64) for df in frames], axis=1)

    counts = np.sum(~np.isnan(returns), axis=1)
    mean_return = np.full(len(grid), np.nan)
    std_return = np.full(len(grid), np.nan)

    # Steps where no seed has finished an episode stay NaN
    seen = counts > 0
    mean_return[seen] = np.nanmean(returns[seen], axis=1)
    std_return[seen] = np.nanstd(returns[seen], axis=1)

    return pd.DataFrame({
        'step': grid.astype(np.int64),
        'mean_return': mean_return,
        'std_return': std_return,
        'n_seeds': counts.astype(np.int64),
    })


def generate_curves(runs):
    """
    Tidy curve table over all modes.

    `runs` is a list of (mode, metrics DataFrame) pairs; seeds of the same
    mode are aggregated together.
    """
    by_mode = {}
    for mode, df in runs:
        by_mode.setdefault(mode, []).append(df)

    tables = []
    for mode in sorted(by_mode):
        curve = generate_return_curve(by_mode[mode])
        curve.insert(0, 'mode', mode)
        tables.append(curve)
        logger.info("%s: %d seeds, %d steps", mode, len(by_mode[mode]), len(curve))

    return pd.concat(tables, ignore_index=True)[CURVE_COLUMNS]


def summarize_final(frames):
    """
    Summary over seeds of the last reported mean episode return:
    mean, std and standard error.
    """
    finals = np.array([df['mean_episode_return'].iloc[-1] for df in frames if not df.empty], dtype=np.float64)
    finals = finals[~np.isnan(finals)]
    if finals.size == 0:
        return {'n_seeds': 0, 'mean': float('nan'), 'std': float('nan'), 'stderr': float('nan')}

    std = float(finals.std())
    return {
        'n_seeds': int(finals.size),
        'mean': float(finals.mean()),
        'std': std,
        'stderr': std / np.sqrt(finals.size),
    }
