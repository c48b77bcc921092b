"""
Command implementations behind the CLI. Every command returns an exit code.
"""

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from config.settings import (
    EXIT_CODES,
    MANIFEST_FILE_NAME,
    CONFIG_FILE_NAME,
    APP_VERSION,
)
from components.environments import make_env, random_policy_return
from components.metrics import generate_curves, summarize_final
from components.trainer import train, evaluate
from components.verification import run_suites
from utils.data import (
    parse_config,
    serialize_config,
    config_from_text,
    load_checkpoint,
    load_metrics,
    save_curves,
    save_manifest,
)
from utils.errors import (
    SprigError,
    ConfigError,
    FormatError,
    AlignmentError,
    UsageError,
)
from utils.helpers import configure_logging, config_hash

logger = logging.getLogger(__name__)

INPUT_ERRORS = (ConfigError, FormatError, AlignmentError, UsageError, OSError)


@dataclass
class RunManifest:
    """What a train invocation ran and where each run landed."""

    config: dict
    seeds: list
    version: str
    lineage: str
    runs: list = field(default_factory=list)

    def add_run(self, seed, run_dir, status, detail=""):
        self.runs.append({'seed': seed, 'run_dir': run_dir, 'status': status, 'detail': detail})

    def to_dict(self):
        return asdict(self)


def exit_code_for(exc):
    if isinstance(exc, INPUT_ERRORS):
        return EXIT_CODES['config_error']
    return EXIT_CODES['runtime_abort']


def config_identity(config):
    """
    (hash, lineage) of a config with its seed neutralized.

    The hash includes the mode; the lineage does not, so sprig and
    ppo_baseline runs of one config share a lineage.
    """
    hashed = config_hash(serialize_config(config.with_overrides(seed=0)))
    lineage = config_hash(serialize_config(config.with_overrides(seed=0, mode='sprig')))
    return hashed, lineage


def run_directory(out, config, seed):
    hashed, _ = config_identity(config)
    return os.path.join(out, f"{config.mode}_{hashed}", f"seed_{seed}")


def _train_one(config_text, seed, run_dir, log_level):
    """One seed; runs in a worker process when --workers > 1."""
    configure_logging(log_level, os.path.join(run_dir, 'train.log'))
    config = config_from_text(config_text).with_overrides(seed=seed)
    try:
        result = train(config, run_dir)
    except (SprigError, OSError) as exc:
        logger.error("seed %d aborted: %s", seed, exc)
        return seed, 'aborted', f"{type(exc).__name__}: {exc}", float('nan')
    final = result.metrics[-1].mean_episode_return if result.metrics else float('nan')
    return seed, 'ok', "", final


# ---------------------------------------
# train
# ---------------------------------------
def cmd_train(config_path, seeds=None, mode=None, out=None, workers=1, log_level="INFO"):
    """Train one run per seed; writes metrics, checkpoints and a manifest."""
    try:
        config = parse_config(config_path) if config_path else config_from_text("")
        overrides = {}
        if mode is not None:
            overrides['mode'] = mode
        if out is not None:
            overrides['output_dir'] = out
        config = config.with_overrides(**overrides)
    except (SprigError, OSError) as exc:
        logger.error("config error: %s", exc)
        return exit_code_for(exc)

    seeds = list(seeds) if seeds else [config.seed]
    if len(set(seeds)) != len(seeds):
        logger.error("config error: seeds must be distinct")
        return EXIT_CODES['config_error']

    hashed, lineage = config_identity(config)
    manifest = RunManifest(config=config.to_dict(), seeds=seeds,
                           version=f"{APP_VERSION}+{hashed}", lineage=lineage)
    base_dir = os.path.join(config.output_dir, f"{config.mode}_{hashed}")
    config_text = serialize_config(config)

    jobs = []
    for seed in seeds:
        run_dir = run_directory(config.output_dir, config, seed)
        os.makedirs(run_dir, exist_ok=True)
        jobs.append((config_text, seed, run_dir, log_level))

    logger.info("training %d seed(s) of %s into %s", len(seeds), config.mode, base_dir)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_train_one, *zip(*jobs)))
    else:
        outcomes = [_train_one(*job) for job in jobs]

    # Drop the per-seed log file handler
    configure_logging(log_level)

    failed = []
    finals = []
    for (seed, status, detail, final), job in zip(outcomes, jobs):
        manifest.add_run(seed, job[2], status, detail)
        if status != 'ok':
            failed.append(seed)
        else:
            finals.append(final)

    save_manifest(os.path.join(base_dir, MANIFEST_FILE_NAME), manifest.to_dict())

    if failed:
        logger.error("run(s) aborted for seed(s) %s", ', '.join(map(str, failed)))
        return EXIT_CODES['runtime_abort']

    finals = np.array(finals, dtype=np.float64)
    if finals.size and not np.all(np.isnan(finals)):
        logger.info("final mean episode return over %d seed(s): %.3f", finals.size, np.nanmean(finals))
    return EXIT_CODES['ok']


# ---------------------------------------
# verify
# ---------------------------------------
def cmd_verify(suite='all', echo=print):
    """Run property suites and print one line per property."""
    try:
        report = run_suites(suite)
    except SprigError as exc:
        logger.error("verify: %s", exc)
        return exit_code_for(exc)

    failures = 0
    for name, results in report.items():
        echo(f"== {name}")
        for result in results:
            echo(result.line())
            failures += int(not result.passed)

    echo(f"{failures} propert{'y' if failures == 1 else 'ies'} failed")
    return EXIT_CODES['property_failure'] if failures else EXIT_CODES['ok']


# ---------------------------------------
# export-curves
# ---------------------------------------
def _run_mode(metrics_path):
    """Mode recorded in the config snapshot next to a metrics file."""
    snapshot = os.path.join(os.path.dirname(os.path.abspath(metrics_path)), CONFIG_FILE_NAME)
    if not os.path.exists(snapshot):
        return 'unknown'
    with open(snapshot) as handle:
        return config_from_text(handle.read(), source=snapshot).mode


def cmd_export_curves(metrics_paths, output_path):
    """Tidy (mode, step, mean, std, n_seeds) CSV from per-seed metrics files."""
    try:
        if not metrics_paths:
            raise UsageError("export-curves needs at least one metrics file")
        runs = [(_run_mode(path), load_metrics(path)) for path in metrics_paths]
        curves = generate_curves(runs)
        for mode in curves['mode'].unique():
            frames = [df for run_mode, df in runs if run_mode == mode]
            summary = summarize_final(frames)
            logger.info("%s final return %.3f +/- %.3f (stderr, %d seeds)",
                        mode, summary['mean'], summary['stderr'], summary['n_seeds'])
    except (SprigError, OSError) as exc:
        logger.error("export-curves: %s", exc)
        return exit_code_for(exc)

    directory = os.path.dirname(output_path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    save_curves(curves, output_path)
    logger.info("wrote %d curve rows to %s", len(curves), output_path)
    return EXIT_CODES['ok']


# ---------------------------------------
# eval
# ---------------------------------------
def cmd_eval(checkpoint_path, episodes=10, seed=0, echo=print):
    """Greedy evaluation of a checkpoint next to the random-policy baseline."""
    try:
        _, config_text = load_checkpoint(checkpoint_path)
        env = make_env(config_from_text(config_text))
        mean, std = evaluate(checkpoint_path, env, episodes, np.random.default_rng(seed))
        base_mean, base_std = random_policy_return(env, episodes, np.random.default_rng(seed))
    except (SprigError, OSError) as exc:
        logger.error("eval: %s", exc)
        return exit_code_for(exc)

    echo(f"greedy return {mean:.3f} +/- {std:.3f} over {episodes} episodes")
    echo(f"random policy {base_mean:.3f} +/- {base_std:.3f}")
    return EXIT_CODES['ok']
