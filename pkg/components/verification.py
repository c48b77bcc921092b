"""
Randomized property suites behind `verify`.

Every suite draws its instances from one master seed, so a report is
reproducible. No environment rollouts happen here.
"""

import logging
import time
from dataclasses import dataclass

import numpy as np

from config.settings import TABULAR_TOL, VERIFY_MASTER_SEED
from components import autodiff as ad
from components import tabular_game as tg
from components.advantage import Trajectory, compute_gae, Minibatch
from components.perception import AttentionStack, perception_cost, leader_utility
from components.policy import PolicyNet, ActionDistribution, follower_loss
from utils.errors import UsageError
from utils.helpers import make_rngs, sup_norm

logger = logging.getLogger(__name__)

TABULAR_GAMMAS = (0.5, 0.9, 0.99)
PRIMITIVE_GRAD_TOL = 1e-4
GRAPH_GRAD_TOL = 1e-3
GAE_TOL = 1e-9
BRUTE_FORCE_TOL = 1e-12


@dataclass
class PropertyResult:
    name: str
    passed: bool
    observed: float
    bound: float
    detail: str = ""

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: observed {self.observed:.3e} (bound {self.bound:.3e}) {self.detail}".rstrip()


# ---------------------------------------
# Oracles
# ---------------------------------------
def brute_force_backup(values, game):
    """Stackelberg backup by explicit loops over (s, a, theta, phi)."""
    mdp = game.base
    out = np.empty(mdp.reward.shape)
    for s in range(mdp.n_states):
        for a in range(mdp.n_actions):
            best = -np.inf
            for j in range(len(game.theta_grid)):
                inner = np.inf if game.mode == 'maxmin' else -np.inf
                for phi in game.phi_grid:
                    continuation = 0.0
                    for t in range(mdp.n_states):
                        continuation += mdp.transition[s, a, t] * values[t, phi[t]]
                    continuation *= mdp.gamma
                    inner = min(inner, continuation) if game.mode == 'maxmin' else max(inner, continuation)
                best = max(best, mdp.reward[s, a] - game.lambda_cost * game.cost[s, j] + inner)
            out[s, a] = best
    return out


def brute_force_gae(rewards, values, dones, gamma, lam):
    """A_t as the explicit masked sum of discounted TD residuals."""
    length = len(rewards)
    not_done = 1.0 - np.asarray(dones, dtype=np.float64)
    delta = rewards + gamma * not_done * values[1:] - values[:-1]
    advantages = np.zeros(length)
    for t in range(length):
        weight = 1.0
        for k in range(t, length):
            advantages[t] += weight * delta[k]
            weight *= gamma * lam * not_done[k]
    return advantages


def discounted_return(rewards, values, dones, gamma):
    """Masked discounted reward sum with the bootstrap value at the end."""
    length = len(rewards)
    not_done = 1.0 - np.asarray(dones, dtype=np.float64)
    returns = np.zeros(length)
    for t in range(length):
        weight = 1.0
        total = 0.0
        for k in range(t, length):
            total += weight * rewards[k]
            weight *= gamma * not_done[k]
        returns[t] = total + weight * values[length]
    return returns


# ---------------------------------------
# Tabular suite
# ---------------------------------------
def tabular_suite(rng, instances=50, pairs=100, tol=TABULAR_TOL):
    worst_excess = -np.inf
    worst_ratio = 0.0
    worst_gap = 0.0
    worst_residual_excess = -np.inf
    worst_operator_error = 0.0
    gap_ok = True

    for index in range(instances):
        gamma = TABULAR_GAMMAS[index % len(TABULAR_GAMMAS)]
        n_states = int(rng.integers(1, 6))
        n_actions = int(rng.integers(1, 4))
        mode = 'maxmin' if index % 2 == 0 else 'cooperative'
        game = tg.random_game(rng, n_states, n_actions, int(rng.integers(1, 4)), gamma,
                              lambda_cost=float(rng.random()), mode=mode)

        for _ in range(pairs):
            f1 = rng.normal(scale=5.0, size=game.shape)
            f2 = rng.normal(scale=5.0, size=game.shape)
            ratio = tg.contraction_ratio(game, f1, f2)
            worst_ratio = max(worst_ratio, ratio)
            worst_excess = max(worst_excess, ratio - gamma)

        from_zero = tg.value_iteration(game, tol=tol, start=0.0)
        from_fifty = tg.value_iteration(game, tol=tol, start=50.0)
        gap = sup_norm(from_zero.fixed_point.values - from_fifty.fixed_point.values)
        allowed = 2.0 * tol / (1.0 - gamma)
        worst_gap = max(worst_gap, gap / allowed)
        gap_ok = gap_ok and gap <= allowed

        for run in (from_zero, from_fifty):
            first = run.residuals[0]
            for n, residual in enumerate(run.residuals):
                worst_residual_excess = max(worst_residual_excess, residual - (gamma ** n * first + tol))

        sample = rng.normal(scale=5.0, size=game.shape)
        fast = tg.stackelberg_bellman_apply(sample, game).values.values
        worst_operator_error = max(worst_operator_error, sup_norm(fast - brute_force_backup(sample, game)))

    return [
        PropertyResult("contraction ratio <= gamma", worst_excess <= 1e-12, worst_ratio, max(TABULAR_GAMMAS),
                       f"over {instances} instances x {pairs} pairs"),
        PropertyResult("unique fixed point from 0 and 50", gap_ok, worst_gap, 1.0,
                       "(gap as a fraction of 2 tol / (1 - gamma))"),
        PropertyResult("residuals within gamma^n bound", worst_residual_excess <= 0.0,
                       max(worst_residual_excess, 0.0), 0.0),
        PropertyResult("operator matches brute force", worst_operator_error <= BRUTE_FORCE_TOL,
                       worst_operator_error, BRUTE_FORCE_TOL),
    ]


# ---------------------------------------
# Gradient suite
# ---------------------------------------
def _away_from_zero(rng, shape, low=0.2):
    return rng.uniform(low, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _primitive_cases(rng):
    """(name, params, build) triples; each build maps params to a scalar."""

    def weighted(out_shape):
        w = rng.normal(size=out_shape)
        return lambda t: ad.tensor_sum(t * w)

    x = ad.parameter(_away_from_zero(rng, (3, 4)), 'x')
    y = ad.parameter(_away_from_zero(rng, (3, 4)), 'y')
    row = ad.parameter(rng.normal(size=(4,)), 'row')
    positive = ad.parameter(rng.uniform(0.5, 2.0, size=(3, 4)), 'positive')
    separated = ad.parameter(x.data + np.where(rng.random((3, 4)) < 0.5, 0.5, -0.5), 'separated')
    inside = ad.parameter(rng.uniform(-0.4, 0.4, size=(3, 4)), 'inside')
    left = ad.parameter(rng.normal(size=(2, 3, 4)), 'left')
    right = ad.parameter(rng.normal(size=(4, 5)), 'right')
    image = ad.parameter(rng.normal(size=(2, 2, 5, 5)), 'image')
    kernel = ad.parameter(rng.normal(size=(3, 2, 3, 3)), 'kernel')
    bias = ad.parameter(rng.normal(size=(3,)), 'bias')
    index = rng.integers(0, 4, size=3)

    w34 = weighted((3, 4))
    w43 = weighted((4, 3))
    w235 = weighted((2, 3, 5))
    w2333 = weighted((2, 3, 3, 3))
    return [
        ('add (broadcast)', [x, row], lambda: w34(ad.add(x, row))),
        ('sub', [x, y], lambda: w34(ad.sub(x, y))),
        ('mul', [x, y], lambda: w34(ad.mul(x, y))),
        ('neg', [x], lambda: w34(ad.neg(x))),
        ('relu', [x], lambda: w34(ad.relu(x))),
        ('tanh', [x], lambda: w34(ad.tanh(x))),
        ('exp', [x], lambda: w34(ad.exp(x))),
        ('log', [positive], lambda: w34(ad.log(positive))),
        ('absolute', [x], lambda: w34(ad.absolute(x))),
        ('clip', [inside], lambda: w34(ad.clip(inside, -0.5, 0.5))),
        ('minimum', [x, separated], lambda: w34(ad.minimum(x, separated))),
        ('sum', [x], lambda: ad.tensor_sum(ad.tensor_sum(x, axis=1) * np.arange(1.0, 4.0))),
        ('mean', [x], lambda: ad.tensor_sum(ad.mean(x, axis=0) * np.arange(1.0, 5.0))),
        ('reshape', [x], lambda: w43(ad.reshape(x, (4, 3)))),
        ('transpose', [x], lambda: w43(ad.transpose(x))),
        ('gather', [x], lambda: ad.tensor_sum(ad.gather(x, index) * np.array([1.0, -2.0, 0.5]))),
        ('matmul (batched)', [left, right], lambda: w235(ad.matmul(left, right))),
        ('conv2d', [image, kernel, bias],
         lambda: w2333(ad.conv2d(image, kernel, bias, stride=2, padding=1))),
        ('softmax', [x], lambda: w34(ad.softmax(x))),
        ('log_softmax', [x], lambda: w34(ad.log_softmax(x))),
    ]


def _toy_agent(rng):
    perception = AttentionStack((2, 8, 8), rng, attention_layers=2, feature_dim=8)
    policy = PolicyNet(8, 3, rng, hidden_units=8)
    observations = rng.random((4, 2, 8, 8))
    advantages = rng.normal(size=4)
    advantages = (advantages - advantages.mean()) / advantages.std()
    minibatch = Minibatch(
        observations=observations,
        actions=rng.integers(0, 3, size=4),
        old_log_probs=np.log(np.full(4, 1.0 / 3.0)) + rng.normal(scale=0.05, size=4),
        advantages=advantages,
        returns=rng.normal(size=4),
        advantage_mean=float(advantages.mean()),
        advantage_std=float(advantages.std()),
    )
    return perception, policy, minibatch


def gradient_suite(rng):
    results = []
    worst = 0.0
    failures = []
    for name, params, build in _primitive_cases(rng):
        error = ad.finite_difference_check(build, params)
        worst = max(worst, error)
        if not error < PRIMITIVE_GRAD_TOL:
            failures.append(name)
    results.append(PropertyResult("primitive gradients", not failures, worst, PRIMITIVE_GRAD_TOL,
                                  f"failing: {', '.join(failures)}" if failures else ""))

    perception, policy, minibatch = _toy_agent(rng)
    lambda_c = 0.5

    def leader_graph():
        features = perception.forward(minibatch.observations)
        raw, _ = perception_cost(features.attention_record, lambda_c)
        logits, _ = policy.forward(features.features)
        log_prob = ActionDistribution(logits).log_prob(minibatch.actions)
        u_policy = ad.mean(log_prob * minibatch.advantages)
        return leader_utility(u_policy, raw, 0.7, lambda_c)

    def follower_graph():
        features = perception.forward(minibatch.observations)
        return follower_loss(minibatch, features, policy, 0.2, 0.5, 0.01, 0.0).loss

    checked_theta = [perception.params[k] for k in ('attn0.query', 'attn1.key', 'proj.bias')]
    checked_phi = [policy.params[k] for k in ('hidden0.weight', 'action_head.weight', 'value_head.bias')]
    for name, build, params in (('leader utility graph', leader_graph, checked_theta),
                                ('follower loss graph', follower_graph, checked_phi)):
        error = ad.finite_difference_check(build, params, eps=1e-6)
        results.append(PropertyResult(name, error < GRAPH_GRAD_TOL, error, GRAPH_GRAD_TOL))
    return results


# ---------------------------------------
# GAE suite
# ---------------------------------------
def gae_suite(rng, trials=100):
    matches = 0
    worst = 0.0
    worst_telescoping = 0.0
    for _ in range(trials):
        length = int(rng.integers(1, 9))
        rewards = rng.normal(size=length)
        values = rng.normal(size=length + 1)
        dones = rng.random(length) < 0.3
        gamma = float(rng.uniform(0.0, 0.999))
        lam = float(rng.uniform(0.0, 1.0))
        traj = Trajectory(None, np.zeros(length, dtype=np.int64), rewards, values, np.zeros(length), dones)

        error = sup_norm(compute_gae(traj, gamma, lam).raw_advantages
                         - brute_force_gae(rewards, values, dones, gamma, lam))
        worst = max(worst, error)
        matches += int(error <= GAE_TOL)

        full = compute_gae(traj, gamma, 1.0)
        worst_telescoping = max(worst_telescoping,
                                sup_norm(full.returns - discounted_return(rewards, values, dones, gamma)))

    return [
        PropertyResult("GAE matches brute force", matches == trials, worst, GAE_TOL,
                       f"({matches}/{trials} exact)"),
        PropertyResult("lambda = 1 telescoping", worst_telescoping <= GAE_TOL, worst_telescoping, GAE_TOL),
    ]


# ---------------------------------------
# Dispatch
# ---------------------------------------
SUITES = {
    'tabular': tabular_suite,
    'gradients': gradient_suite,
    'gae': gae_suite,
}


def run_suites(suite='all', master_seed=VERIFY_MASTER_SEED):
    """Run one suite (or all) and return {suite name: [PropertyResult]}."""
    names = list(SUITES) if suite == 'all' else [suite]
    for name in names:
        if name not in SUITES:
            raise UsageError(f"unknown suite '{suite}'")

    rngs = make_rngs(master_seed, list(SUITES))
    report = {}
    for name in names:
        start = time.perf_counter()
        report[name] = SUITES[name](rngs[name])
        logger.info("suite %s finished in %.1fs", name, time.perf_counter() - start)
    return report
