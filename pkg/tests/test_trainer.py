import os
import warnings

import numpy as np
import pytest

from components import autodiff as ad
from components import trainer
from components.advantage import Minibatch
from components.environments import make_env, random_policy_return
from components.perception import perception_cost
from components.policy import ActionDistribution, entropy, follower_loss
from components.trainer import (
    Agent,
    collect_rollout,
    leader_objective,
    leader_stage,
    follower_stage,
    joint_stage,
    baseline_loss,
    train,
    load_agent,
    evaluate,
)
from components.metrics import summarize_final
from config.settings import METRICS_COLUMNS, METRICS_FILE_NAME
from utils.data import load_metrics, parse_config, save_checkpoint, serialize_config
from utils.errors import ConfigError, ContractViolationError, FormatError, TrainingAbortedError
from utils.helpers import fan_out_seeds


def build_agent(config, seed=0):
    env = make_env(config)
    agent = Agent.build(config, env.observation_shape, env.n_actions, np.random.default_rng(seed))
    return env, agent


def snapshot(params):
    return [p.data.copy() for p in params]


def assert_same(params, before):
    for p, data in zip(params, before):
        np.testing.assert_array_equal(p.data, data)


def assert_changed(params, before):
    assert any(not np.array_equal(p.data, data) for p, data in zip(params, before))


class TestCollectRollout:

    def test_lengths(self, tiny_config, rng):
        env, agent = build_agent(tiny_config)
        traj = collect_rollout(env, agent.perception, agent.policy, 16, rng)
        assert traj.observations.shape == (16,) + env.observation_shape
        assert len(traj.rewards) == 16 and len(traj.values) == 17
        # episodes are capped at 12 steps, so one must end inside 16
        assert traj.dones.any()
        assert len(traj.episode_returns) == int(traj.dones.sum())

    def test_reproducible(self, tiny_config):
        runs = []
        for _ in range(2):
            env, agent = build_agent(tiny_config)
            runs.append(collect_rollout(env, agent.perception, agent.policy, 16,
                                        np.random.default_rng(5), env_rng=np.random.default_rng(6)))
        for name in ('observations', 'actions', 'rewards', 'values', 'log_probs', 'dones'):
            np.testing.assert_array_equal(getattr(runs[0], name), getattr(runs[1], name))

    def test_every_step_terminal(self, tiny_config, rng):
        env, agent = build_agent(tiny_config.with_overrides(max_episode_length=1))
        traj = collect_rollout(env, agent.perception, agent.policy, 8, rng)
        assert traj.dones.all()
        assert len(traj.episode_returns) == 8

    def test_carry_continues_episode(self, tiny_config, rng):
        env, agent = build_agent(tiny_config)
        carry = trainer.EpisodeCarry()
        collect_rollout(env, agent.perception, agent.policy, 5, rng, carry)
        observation = carry.observation.copy()
        traj = collect_rollout(env, agent.perception, agent.policy, 5, rng, carry)
        np.testing.assert_array_equal(traj.observations[0], observation)


class TestLeaderStage:

    def test_policy_untouched(self, tiny_config, rng, make_minibatch):
        env, agent = build_agent(tiny_config)
        minibatch = make_minibatch(rng, env.observation_shape, env.n_actions)
        theta, phi = snapshot(agent.theta), snapshot(agent.phi)
        stats = leader_stage(minibatch, agent.perception, agent.policy, tiny_config)
        assert_same(agent.phi, phi)
        assert_changed(agent.theta, theta)
        assert stats['leader_grad_norm'] > 0.0

    def test_zero_learning_rate(self, tiny_config, rng, make_minibatch):
        config = tiny_config.with_overrides(learning_rate=0.0)
        env, agent = build_agent(config)
        minibatch = make_minibatch(rng, env.observation_shape, env.n_actions)
        theta = snapshot(agent.theta)
        leader_stage(minibatch, agent.perception, agent.policy, config)
        assert_same(agent.theta, theta)

    def test_no_gradient_reaches_policy(self, tiny_config, rng, make_minibatch):
        env, agent = build_agent(tiny_config)
        minibatch = make_minibatch(rng, env.observation_shape, env.n_actions)
        ad.zero_grad(agent.phi)
        leader_stage(minibatch, agent.perception, agent.policy, tiny_config)
        assert all(np.all(p.grad == 0.0) for p in agent.phi)

    def test_pure_cost_gradient_at_full_cooperation(self, tiny_config, rng, make_minibatch):
        config = tiny_config.with_overrides(alpha_coop=1.0)
        env, agent = build_agent(config)
        minibatch = make_minibatch(rng, env.observation_shape, env.n_actions)

        ad.zero_grad(agent.theta)
        u_leader, _, _, _ = leader_objective(minibatch, agent.perception, agent.policy, config)
        ad.backward(-u_leader)
        from_utility = [p.grad.copy() for p in agent.theta]

        ad.zero_grad(agent.theta)
        features = agent.perception.forward(minibatch.observations)
        _, weighted = perception_cost(features.attention_record, config.lambda_cost)
        ad.backward(weighted)
        for a, p in zip(from_utility, agent.theta):
            np.testing.assert_allclose(a, p.grad, atol=1e-12)

    def test_gradient_matches_finite_differences(self, tiny_config, rng, make_minibatch):
        env, agent = build_agent(tiny_config)
        minibatch = make_minibatch(rng, env.observation_shape, env.n_actions)
        params = [agent.perception.params['attn0.query'], agent.perception.params['proj.bias']]

        def build():
            return leader_objective(minibatch, agent.perception, agent.policy, tiny_config)[0]

        assert ad.finite_difference_check(build, params, eps=1e-6) < 1e-3

    def test_unnormalized_minibatch(self, tiny_config, rng, make_minibatch):
        env, agent = build_agent(tiny_config)
        minibatch = make_minibatch(rng, env.observation_shape, env.n_actions)
        minibatch.advantage_std = 4.0
        with pytest.raises(ContractViolationError):
            leader_stage(minibatch, agent.perception, agent.policy, tiny_config)

    def test_raw_advantages_without_stats(self, tiny_config, rng):
        env, agent = build_agent(tiny_config)
        minibatch = Minibatch(
            observations=rng.random((4,) + env.observation_shape),
            actions=np.array([0, 1, 1, 0]),
            old_log_probs=np.full(4, np.log(1.0 / env.n_actions)),
            advantages=np.array([10.0, 20.0, 30.0, 40.0]),
            returns=np.zeros(4),
        )
        theta = snapshot(agent.theta)
        with pytest.raises(ContractViolationError):
            leader_stage(minibatch, agent.perception, agent.policy, tiny_config)
        assert_same(agent.theta, theta)


class TestFollowerStage:

    def test_perception_untouched(self, tiny_config, rng, make_minibatch):
        env, agent = build_agent(tiny_config)
        minibatch = make_minibatch(rng, env.observation_shape, env.n_actions)
        theta, phi = snapshot(agent.theta), snapshot(agent.phi)
        follower_stage(minibatch, agent.perception, agent.policy, tiny_config)
        assert_same(agent.theta, theta)
        assert_changed(agent.phi, phi)

    def test_zero_learning_rate(self, tiny_config, rng, make_minibatch):
        config = tiny_config.with_overrides(learning_rate=0.0)
        env, agent = build_agent(config)
        minibatch = make_minibatch(rng, env.observation_shape, env.n_actions)
        phi = snapshot(agent.phi)
        follower_stage(minibatch, agent.perception, agent.policy, config)
        assert_same(agent.phi, phi)

    def test_only_entropy_drives_degenerate_batch(self, tiny_config, rng):
        env, agent = build_agent(tiny_config)
        observations = rng.random((6,) + env.observation_shape)
        actions = rng.integers(0, env.n_actions, size=6)
        with ad.no_grad():
            features = agent.perception.forward(observations).features.data
            logits, values = agent.policy.forward(features)
            old_log_probs = ActionDistribution(logits).log_prob(actions).data
        minibatch = Minibatch(observations, actions, old_log_probs, np.zeros(6), values.data.copy(),
                              advantage_mean=0.0, advantage_std=0.0)

        ad.zero_grad(agent.phi)
        terms = follower_loss(minibatch, features, agent.policy, 0.2, 0.5, 0.01, 0.0)
        ad.backward(terms.loss)
        full = [p.grad.copy() for p in agent.phi]

        ad.zero_grad(agent.phi)
        logits, _ = agent.policy.forward(features)
        ad.backward(entropy(ActionDistribution(logits)) * -0.01)
        for a, p in zip(full, agent.phi):
            np.testing.assert_allclose(a, p.grad, atol=1e-12)

    def test_cost_term_is_lambda_weighted(self, tiny_config, rng, make_minibatch, monkeypatch):
        config = tiny_config.with_overrides(lambda_cost=2.0)
        env, agent = build_agent(config)
        minibatch = make_minibatch(rng, env.observation_shape, env.n_actions)
        seen = []

        def recording(*args):
            seen.append(args[-1])
            return follower_loss(*args)

        monkeypatch.setattr(trainer, 'follower_loss', recording)
        follower_stage(minibatch, agent.perception, agent.policy, config)

        with ad.no_grad():
            raw, _ = perception_cost(agent.perception.forward(minibatch.observations).attention_record, 2.0)
        assert seen == [pytest.approx(2.0 * raw.item(), abs=1e-12)]


class TestGradientClipping:

    @pytest.fixture
    def clipped_norms(self, monkeypatch):
        norms = []
        step = ad.adam_step

        def recording(params, state, lr):
            norms.append(ad.global_grad_norm(params))
            return step(params, state, lr)

        monkeypatch.setattr(ad, 'adam_step', recording)
        return norms

    def test_follower_ceiling(self, tiny_config, rng, make_minibatch, clipped_norms):
        env, agent = build_agent(tiny_config)
        minibatch = make_minibatch(rng, env.observation_shape, env.n_actions)
        minibatch.returns = minibatch.returns * 1000.0
        stats = follower_stage(minibatch, agent.perception, agent.policy, tiny_config)
        assert stats['follower_grad_norm'] > tiny_config.max_grad_norm
        assert clipped_norms[0] <= tiny_config.max_grad_norm + 1e-9
        assert clipped_norms[0] == pytest.approx(tiny_config.max_grad_norm, rel=1e-9)

    @pytest.mark.parametrize('ceiling', [0.5, 1e-8])
    def test_leader_ceiling(self, tiny_config, rng, make_minibatch, clipped_norms, ceiling):
        config = tiny_config.with_overrides(max_grad_norm=ceiling)
        env, agent = build_agent(config)
        minibatch = make_minibatch(rng, env.observation_shape, env.n_actions)
        stats = leader_stage(minibatch, agent.perception, agent.policy, config)
        assert clipped_norms[0] <= ceiling + 1e-9
        if stats['leader_grad_norm'] > ceiling:
            assert clipped_norms[0] == pytest.approx(ceiling, rel=1e-9)

    def test_joint_ceiling(self, tiny_config, rng, make_minibatch, clipped_norms):
        env, agent = build_agent(tiny_config.with_overrides(mode='ppo_baseline'))
        minibatch = make_minibatch(rng, env.observation_shape, env.n_actions)
        minibatch.returns = minibatch.returns * 1000.0
        stats = joint_stage(minibatch, agent.perception, agent.policy, tiny_config)
        assert stats['follower_grad_norm'] > tiny_config.max_grad_norm
        assert clipped_norms[0] <= tiny_config.max_grad_norm + 1e-9


class TestBaseline:

    def test_reduces_to_ppo_without_cost(self, tiny_config, rng, make_minibatch):
        config = tiny_config.with_overrides(alpha_coop=0.0, lambda_cost=0.0)
        env, agent = build_agent(config)
        minibatch = make_minibatch(rng, env.observation_shape, env.n_actions)

        features = agent.perception.forward(minibatch.observations)
        _, weighted = perception_cost(features.attention_record, config.lambda_cost)
        staged = follower_loss(minibatch, features, agent.policy, config.clip_epsilon, config.value_coef,
                               config.entropy_coef, weighted.item())
        plain, _ = baseline_loss(minibatch, agent.perception, agent.policy, config)
        assert staged.loss.item() == pytest.approx(plain.loss.item(), abs=1e-10)

        u_leader, u_policy, _, _ = leader_objective(minibatch, agent.perception, agent.policy, config)
        assert u_leader.item() == pytest.approx(u_policy.item(), abs=1e-15)

    def test_joint_stage_moves_both(self, tiny_config, rng, make_minibatch):
        config = tiny_config.with_overrides(mode='ppo_baseline')
        env, agent = build_agent(config)
        minibatch = make_minibatch(rng, env.observation_shape, env.n_actions)
        theta, phi = snapshot(agent.theta), snapshot(agent.phi)
        stats = joint_stage(minibatch, agent.perception, agent.policy, config)
        assert_changed(agent.theta, theta)
        assert_changed(agent.phi, phi)
        assert np.isnan(stats['leader_utility'])
        assert 0.0 <= stats['raw_cost'] <= 1.0

    def test_conv_torso(self, tiny_config):
        config = tiny_config.with_overrides(mode='ppo_baseline', baseline_torso='conv')
        result = train(config)
        assert all(m.raw_cost == 0.0 for m in result.metrics)


class TestTrain:

    def test_stage_passes(self, tiny_config):
        result = train(tiny_config)
        # 3 iterations x 2 epochs x 2 minibatches
        assert result.stage_passes == {'leader': 12, 'follower': 12}
        assert len(result.metrics) == 3
        assert [m.env_steps for m in result.metrics] == [16, 32, 48]

    def test_baseline_runs_no_leader_stage(self, tiny_config):
        result = train(tiny_config.with_overrides(mode='ppo_baseline'))
        assert result.stage_passes == {'leader': 0, 'follower': 12}

    @pytest.mark.parametrize("mode", ['sprig', 'ppo_baseline'])
    def test_reproducible(self, tiny_config, mode):
        config = tiny_config.with_overrides(mode=mode)
        rows = [[list(m.as_row().values()) for m in train(config).metrics] for _ in range(2)]
        np.testing.assert_array_equal(np.array(rows[0], dtype=float), np.array(rows[1], dtype=float))

    def test_seed_changes_run(self, tiny_config):
        a = train(tiny_config).agent.state_arrays()
        b = train(tiny_config.with_overrides(seed=1)).agent.state_arrays()
        assert any(not np.array_equal(a[name], b[name]) for name in a)

    def test_writes_run_directory(self, tiny_config, tmp_path):
        result = train(tiny_config.with_overrides(checkpoint_every=2), str(tmp_path))
        metrics = load_metrics(str(tmp_path / 'metrics.csv'))
        assert list(metrics.columns) == METRICS_COLUMNS
        assert len(metrics) == 3
        assert (tmp_path / 'timing.csv').exists()
        assert (tmp_path / 'config.cfg').exists()
        assert (tmp_path / 'iter_000002.npz').exists()
        assert result.checkpoint_path == os.path.join(str(tmp_path), 'final.npz')

    def test_rerun_overwrites_metrics(self, tiny_config, tmp_path):
        train(tiny_config, str(tmp_path))
        first = (tmp_path / 'metrics.csv').read_bytes()
        train(tiny_config, str(tmp_path))
        assert (tmp_path / 'metrics.csv').read_bytes() == first

    def test_non_finite_utility_aborts(self, tiny_config, monkeypatch):
        monkeypatch.setattr(trainer, 'leader_utility', lambda u_policy, *args, **kwargs: u_policy * np.inf)
        with pytest.raises(TrainingAbortedError) as info:
            train(tiny_config)
        assert info.value.iteration == 0
        assert info.value.stage == 'leader'

    def test_budget_below_one_rollout(self, tiny_config):
        with pytest.raises(ConfigError):
            train(tiny_config.with_overrides(total_timesteps=8))


class TestCheckpoint:

    def test_round_trip(self, tiny_config, tmp_path):
        result = train(tiny_config, str(tmp_path))
        agent, config = load_agent(result.checkpoint_path)
        assert config == tiny_config
        expected = result.agent.state_arrays()
        loaded = agent.state_arrays()
        assert set(loaded) == set(expected)
        for name in expected:
            np.testing.assert_array_equal(loaded[name], expected[name])

    def test_evaluate_is_reproducible(self, tiny_config, tmp_path):
        result = train(tiny_config, str(tmp_path))
        env = make_env(tiny_config)
        first = evaluate(result.checkpoint_path, env, 3, np.random.default_rng(0))
        second = evaluate(result.checkpoint_path, env, 3, np.random.default_rng(0))
        assert first == second

    def test_untrained_agent_near_random_policy(self, tiny_beam_config, tmp_path):
        env, agent = build_agent(tiny_beam_config)
        path = str(tmp_path / 'untrained.npz')
        save_checkpoint(path, agent.state_arrays(), serialize_config(tiny_beam_config))

        mean, _ = evaluate(path, env, 20, np.random.default_rng(0))
        random_mean, random_std = random_policy_return(env, 200, np.random.default_rng(1))
        assert random_std > 0.0
        assert abs(mean - random_mean) <= 2.0 * random_std

    def test_shape_mismatch(self, tiny_config):
        _, agent = build_agent(tiny_config)
        arrays = {name: np.zeros(1) for name in agent.state_arrays()}
        with pytest.raises(FormatError):
            agent.load_arrays(arrays)

    def test_missing_parameter(self, tiny_config):
        _, agent = build_agent(tiny_config)
        arrays = dict(agent.state_arrays())
        arrays.pop('policy.value_head.bias')
        with pytest.raises(FormatError):
            agent.load_arrays(arrays)


@pytest.mark.slow
def test_both_modes_beat_random_policy(tmp_path):
    here = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    summaries = {}
    for name in ('beam_catch_sprig.cfg', 'beam_catch_baseline.cfg'):
        config = parse_config(os.path.join(here, 'configs', name))
        frames = []
        for seed in fan_out_seeds(config.seed, 5):
            run_dir = str(tmp_path / config.mode / f'seed_{seed}')
            train(config.with_overrides(seed=seed), run_dir)
            frames.append(load_metrics(os.path.join(run_dir, METRICS_FILE_NAME)))
        summaries[config.mode] = summarize_final(frames)

    env = make_env(config)
    random_mean, _ = random_policy_return(env, 100, np.random.default_rng(0))
    for mode, summary in summaries.items():
        assert summary['n_seeds'] == 5, mode
        assert summary['mean'] - 3.0 * summary['stderr'] > random_mean, (mode, summary, random_mean)

    if summaries['sprig']['mean'] < summaries['ppo_baseline']['mean']:
        warnings.warn(
            f"sprig final return {summaries['sprig']['mean']:.3f} below "
            f"ppo_baseline {summaries['ppo_baseline']['mean']:.3f}"
        )
