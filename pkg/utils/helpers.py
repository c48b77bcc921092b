import hashlib
import logging

import numpy as np

from config.settings import LOG_FORMAT


def configure_logging(level="INFO", log_file=None):
    """
    Installs one stream handler on the root logger
    (and a file handler when a run directory is given).
    """
    root = logging.getLogger()
    root.setLevel(level)

    # Avoid stacking handlers when called once per run
    for handler in list(root.handlers):
        if getattr(handler, '_sprig', False):
            root.removeHandler(handler)
            handler.close()

    handlers = [logging.StreamHandler()]
    if log_file is not None:
        handlers.append(logging.FileHandler(log_file, mode='a'))

    for handler in handlers:
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handler._sprig = True
        root.addHandler(handler)


def make_rngs(seed, names):
    """
    One independent numpy Generator per name, all derived from one seed.

    The streams do not depend on how often the others are drawn from.
    """
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(child) for name, child in zip(names, children)}


def fan_out_seeds(master_seed, count):
    """Per-run seeds: master seed + run index."""
    return [int(master_seed) + i for i in range(count)]


def checksum(arrays):
    """sha256 over the raw bytes of a sequence of arrays (order matters)."""
    digest = hashlib.sha256()
    for array in arrays:
        array = np.ascontiguousarray(array)
        digest.update(str(array.shape).encode())
        digest.update(array.tobytes())
    return digest.hexdigest()


def config_hash(text):
    return hashlib.sha256(text.encode()).hexdigest()[:10]


def sup_norm(array):
    return float(np.max(np.abs(array))) if np.size(array) else 0.0
