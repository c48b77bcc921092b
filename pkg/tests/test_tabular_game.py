import numpy as np
import pytest

from components import tabular_game as tg
from components.verification import brute_force_backup
from utils.errors import (
    ConfigError,
    InvalidValueError,
    NonConvergenceError,
    StaleInputError,
    UndefinedRatioError,
)


def single_state_mdp(reward=1.0, gamma=0.99):
    return tg.TabularMdp(np.ones((1, 1, 1)), np.full((1, 1), reward), gamma)


def straight_loop_bellman(f, mdp):
    out = np.zeros(mdp.reward.shape)
    for s in range(mdp.n_states):
        for a in range(mdp.n_actions):
            total = 0.0
            for t in range(mdp.n_states):
                total += mdp.transition[s, a, t] * max(f[t, b] for b in range(mdp.n_actions))
            out[s, a] = mdp.reward[s, a] + mdp.gamma * total
    return out


class TestTabularMdp:

    def test_rejects_rows_not_summing_to_one(self):
        transition = np.full((2, 1, 2), 0.4)
        with pytest.raises(ConfigError):
            tg.TabularMdp(transition, np.zeros((2, 1)), 0.9)

    def test_rejects_gamma_of_one(self):
        with pytest.raises(ConfigError):
            single_state_mdp(gamma=1.0)

    def test_declared_r_max_is_enforced(self):
        with pytest.raises(ConfigError):
            tg.TabularMdp(np.ones((1, 1, 1)), np.full((1, 1), 2.0), 0.5, r_max=1.0)

    def test_arrays_are_read_only(self):
        mdp = single_state_mdp()
        with pytest.raises(ValueError):
            mdp.reward[0, 0] = 5.0


class TestBellmanApply:

    def test_zero_reward_keeps_zero_table(self, rng):
        mdp = tg.random_mdp(rng, 3, 2, 0.9)
        mdp = tg.TabularMdp(mdp.transition, np.zeros((3, 2)), 0.9)
        out = tg.bellman_apply(np.zeros((3, 2)), mdp)
        assert np.all(out.values == 0.0)

    def test_single_state_geometric_series(self):
        mdp = single_state_mdp()
        assert tg.bellman_apply(np.zeros((1, 1)), mdp).values[0, 0] == 1.0
        result = tg.bellman_value_iteration(mdp, tol=1e-10)
        assert result.fixed_point.values[0, 0] == pytest.approx(100.0, abs=1e-6)

    def test_matches_straight_loop(self, rng):
        mdp = tg.random_mdp(rng, 4, 2, 0.9)
        f = rng.normal(size=(4, 2))
        np.testing.assert_allclose(tg.bellman_apply(f, mdp).values, straight_loop_bellman(f, mdp),
                                   atol=1e-12)

    def test_non_finite_input(self):
        with pytest.raises(InvalidValueError):
            tg.bellman_apply(np.array([[np.nan]]), single_state_mdp())


class TestStackelbergApply:

    def test_degenerate_game_is_policy_evaluation(self, rng):
        mdp = tg.random_mdp(rng, 3, 2, 0.9)
        phi = np.array([[1, 0, 1]])
        game = tg.TabularGameMdp.from_mdp(mdp, phi_grid=phi)
        f = rng.normal(size=(3, 2))
        expected = mdp.reward + 0.9 * mdp.transition @ f[np.arange(3), phi[0]]
        backup = tg.stackelberg_bellman_apply(f, game)
        np.testing.assert_allclose(backup.values.values, expected, atol=1e-12)
        assert np.all(backup.argmax_theta == 0)
        assert np.all(backup.argmin_phi == 0)

    def test_zero_lambda_ignores_theta_grid(self, rng):
        mdp = tg.random_mdp(rng, 3, 2, 0.9)
        f = rng.normal(size=(3, 2))
        one = tg.TabularGameMdp.from_mdp(mdp, theta_grid=(0,), cost=np.zeros((3, 1)))
        many = tg.TabularGameMdp.from_mdp(mdp, theta_grid=(0, 1, 2), cost=rng.random((3, 3)))
        np.testing.assert_array_equal(tg.stackelberg_bellman_apply(f, one).values.values,
                                      tg.stackelberg_bellman_apply(f, many).values.values)

    @pytest.mark.parametrize("mode", ['maxmin', 'cooperative'])
    def test_matches_exhaustive_enumeration(self, rng, mode):
        game = tg.random_game(rng, 3, 2, 2, 0.9, lambda_cost=0.7, mode=mode)
        assert len(game.phi_grid) == 8
        f = rng.normal(size=(3, 2))
        np.testing.assert_allclose(tg.stackelberg_bellman_apply(f, game).values.values,
                                   brute_force_backup(f, game), atol=1e-12)

    def test_reduces_to_bellman_with_greedy_phi(self, rng):
        mdp = tg.random_mdp(rng, 4, 3, 0.9)
        f = rng.normal(size=(4, 3))
        greedy = np.argmax(f, axis=1)[None, :]
        game = tg.TabularGameMdp.from_mdp(mdp, phi_grid=greedy)
        np.testing.assert_allclose(tg.stackelberg_bellman_apply(f, game).values.values,
                                   tg.bellman_apply(f, mdp).values, atol=1e-12)

    def test_cooperative_never_below_maxmin(self, rng):
        game = tg.random_game(rng, 3, 2, 2, 0.9)
        coop = tg.TabularGameMdp(game.base, game.theta_grid, game.phi_grid, game.cost,
                                 game.lambda_cost, mode='cooperative')
        f = rng.normal(size=(3, 2))
        assert np.all(tg.stackelberg_bellman_apply(f, coop).values.values
                      >= tg.stackelberg_bellman_apply(f, game).values.values)

    def test_empty_theta_grid(self, rng):
        mdp = tg.random_mdp(rng, 2, 2, 0.9)
        with pytest.raises(ConfigError):
            tg.TabularGameMdp(mdp, (), tg.enumerate_phi(2, 2), np.zeros((2, 0)), 0.0)

    def test_cost_outside_unit_interval(self, rng):
        mdp = tg.random_mdp(rng, 2, 2, 0.9)
        with pytest.raises(ConfigError):
            tg.TabularGameMdp.from_mdp(mdp, cost=np.full((2, 1), 1.5))


class TestValueIteration:

    def test_unique_fixed_point_from_two_starts(self, rng):
        game = tg.random_game(rng, 3, 2, 2, 0.9)
        tol = 1e-10
        a = tg.value_iteration(game, tol=tol, start=0.0)
        b = tg.value_iteration(game, tol=tol, start=50.0)
        gap = np.max(np.abs(a.fixed_point.values - b.fixed_point.values))
        assert gap <= 2 * tol / (1 - 0.9)

    def test_residuals_decay_geometrically(self, rng):
        game = tg.random_game(rng, 4, 2, 3, 0.9)
        result = tg.value_iteration(game, tol=1e-10)
        residuals = result.residuals
        for n in range(len(residuals) - 1):
            assert residuals[n + 1] <= 0.9 * residuals[n] + 1e-10
        assert residuals[-1] < 1e-10
        assert result.iterations == len(residuals)

    def test_matches_brute_force_fixed_point(self, rng):
        game = tg.random_game(rng, 4, 2, 2, 0.5)
        f = np.zeros((4, 2))
        for _ in range(200):
            f = brute_force_backup(f, game)
        result = tg.value_iteration(game, tol=1e-10)
        np.testing.assert_allclose(result.fixed_point.values, f, atol=1e-9)

    def test_non_convergence_carries_residual(self, rng):
        game = tg.random_game(rng, 3, 2, 2, 0.99)
        with pytest.raises(NonConvergenceError) as info:
            tg.value_iteration(game, tol=1e-10, max_iters=3)
        assert info.value.iterations == 3
        assert info.value.last_residual > 0.0

    def test_tol_must_be_positive(self, rng):
        game = tg.random_game(rng, 2, 2, 1, 0.9)
        with pytest.raises(ConfigError):
            tg.value_iteration(game, tol=0.0)


class TestContractionRatio:

    def test_random_pairs_bounded_by_gamma(self, rng):
        for _ in range(5):
            game = tg.random_game(rng, 3, 2, 2, 0.99, phi='sample', n_phi=5)
            for _ in range(40):
                ratio = tg.contraction_ratio(game, rng.normal(size=(3, 2)), rng.normal(size=(3, 2)))
                assert ratio <= 0.99 + 1e-12

    def test_constant_shift_gives_gamma(self, rng):
        game = tg.random_game(rng, 3, 2, 2, 0.9)
        f = rng.normal(size=(3, 2))
        ratio = tg.contraction_ratio(game, f, f + 3.0)
        assert ratio == pytest.approx(0.9, abs=1e-12)

    def test_matches_enumeration_oracle(self, rng):
        game = tg.random_game(rng, 3, 2, 2, 0.9)
        f1, f2 = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
        expected = (np.max(np.abs(brute_force_backup(f1, game) - brute_force_backup(f2, game)))
                    / np.max(np.abs(f1 - f2)))
        assert tg.contraction_ratio(game, f1, f2) == pytest.approx(expected, abs=1e-12)

    def test_identical_tables(self, rng):
        game = tg.random_game(rng, 2, 2, 1, 0.9)
        f = np.ones((2, 2))
        with pytest.raises(UndefinedRatioError):
            tg.contraction_ratio(game, f, f)


class TestEquilibrium:

    def test_singleton_grids(self, rng):
        mdp = tg.random_mdp(rng, 3, 2, 0.9)
        game = tg.TabularGameMdp.from_mdp(mdp, phi_grid=np.array([[0, 1, 0]]))
        fixed = tg.value_iteration(game).fixed_point
        eq = tg.extract_equilibrium(game, fixed)
        assert np.all(eq.theta_star == 0)
        assert np.all(eq.phi_star == 0)
        np.testing.assert_array_equal(eq.greedy_policy, np.argmax(fixed.values, axis=1))

    def test_cheaper_theta_dominates(self, rng):
        mdp = tg.random_mdp(rng, 3, 2, 0.9)
        cost = np.column_stack([np.full(3, 0.8), np.full(3, 0.1)])
        game = tg.TabularGameMdp.from_mdp(mdp, theta_grid=(0, 1), cost=cost, lambda_cost=1.0)
        eq = tg.extract_equilibrium(game, tg.value_iteration(game).fixed_point)
        assert np.all(eq.theta_star == 1)

    def test_stale_input(self, rng):
        game = tg.random_game(rng, 3, 2, 2, 0.9)
        with pytest.raises(StaleInputError):
            tg.extract_equilibrium(game, np.zeros((3, 2)))
