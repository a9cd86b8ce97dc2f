import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_advantages, brute_force_objective
from sparsevid.grpo import (CHECKPOINT_HEADER, FEATURES, REFERENCE_LEARNING_RATE, GrpoConfig,
                            ToyPolicy, TrajectoryGroup, build_batch, group_advantages,
                            grpo_objective, rollout, smoothed, state_features, toy_objective,
                            toy_policy_gradient, train_toy)
from sparsevid.synth import EnvConfig, SyntheticEnv


def test_advantages_of_one_two_three():
    adv = group_advantages([1, 2, 3])
    expected = 1.0 / (math.sqrt(2 / 3) + 1e-8)
    assert adv.tolist() == pytest.approx([-expected, 0.0, expected], abs=1e-15)
    assert adv[2] == pytest.approx(1.224744871391589, abs=1e-7)


def test_constant_returns_give_zero_advantages():
    assert group_advantages([5, 5, 5, 5]).tolist() == [0.0] * 4


def test_advantages_need_two():
    with pytest.raises(ValueError):
        group_advantages([1.0])


@settings(max_examples=300)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=2, max_size=32))
def test_advantage_standardization(returns):
    adv = group_advantages(returns)
    assert abs(adv.mean()) < 1e-9
    sigma = np.std(returns)
    if np.ptp(returns) > 0:
        # The 1e-8 stabilizer scales the spread to sigma / (sigma + 1e-8).
        assert adv.std() == pytest.approx(sigma / (sigma + 1e-8), rel=1e-9)
    if sigma >= 1e-2:
        assert abs(adv.std() - 1) < 1e-6
    assert adv.tolist() == pytest.approx(brute_force_advantages(returns), rel=1e-9, abs=1e-9)


def _random_group(rng, G=5):
    returns = rng.normal(size=G).tolist()
    new, old = [], []
    for _ in range(G):
        n = int(rng.integers(1, 12))
        o = rng.normal(-1.5, 0.7, size=n)
        new.append((o + rng.normal(0, 0.3, size=n)).tolist())
        old.append(o.tolist())
    return TrajectoryGroup(returns, new, old)


def test_objective_matches_brute_force():
    rng = np.random.default_rng(7)
    for _ in range(500):
        g = _random_group(rng)
        adv = group_advantages(g.returns)
        eps = float(rng.uniform(0.05, 0.5))
        got = grpo_objective(g, adv, eps)
        ref = brute_force_objective(g.logp_new, g.logp_old, adv.tolist(), eps)
        assert abs(got - ref) <= 1e-12 * max(1.0, abs(ref))


def test_ratio_one_gives_mean_advantage():
    g = TrajectoryGroup([1.0, 4.0, 2.0], [[-1.0, -2.0], [-0.5], [-3.0] * 4],
                        [[-1.0, -2.0], [-0.5], [-3.0] * 4])
    adv = group_advantages(g.returns)
    assert grpo_objective(g, adv, 0.2) == pytest.approx(adv.mean(), abs=1e-15)
    assert abs(grpo_objective(g, adv, 0.2)) < 1e-12


def test_clip_rule():
    eps = 0.2
    rho = 1 + 2 * eps
    g = TrajectoryGroup([0.0, 0.0], [[math.log(rho)], [0.0]], [[0.0], [0.0]])
    assert grpo_objective(g, [1.0, 0.0], eps) == pytest.approx((1 + eps) * 1.0 / 2)
    # Negative advantage keeps the unclipped (more pessimistic) term.
    assert grpo_objective(g, [-1.0, 0.0], eps) == pytest.approx(-rho / 2)


def test_objective_order_invariant():
    rng = np.random.default_rng(3)
    g = _random_group(rng)
    adv = group_advantages(g.returns)
    perm = rng.permutation(g.size)
    h = TrajectoryGroup([g.returns[i] for i in perm], [g.logp_new[i] for i in perm],
                        [g.logp_old[i] for i in perm])
    assert grpo_objective(h, adv[perm], 0.2) == pytest.approx(grpo_objective(g, adv, 0.2), abs=1e-15)


def test_group_validation():
    with pytest.raises(ValueError):
        TrajectoryGroup([1.0], [[0.0]], [[0.0]])
    with pytest.raises(ValueError):
        TrajectoryGroup([1.0, 2.0], [[0.0], [0.0, 1.0]], [[0.0], [0.0]])
    with pytest.raises(ValueError):
        TrajectoryGroup([1.0, 2.0], [[0.0], [float("inf")]], [[0.0], [0.0]])
    with pytest.raises(ValueError):
        GrpoConfig(epsilon=1.0)


# -- toy policy --------------------------------------------------------------------

def _batch(seed=0, groups=3, G=4, theta=None):
    env = SyntheticEnv()
    rng = np.random.default_rng(seed)
    policy = ToyPolicy(theta) if theta is not None else ToyPolicy()
    gs = []
    for s in range(groups):
        et = env.sample_task(seed * 100 + s)
        gs.append([rollout(env, et, policy, rng) for _ in range(G)])
    return build_batch(gs), policy


def test_policy_probabilities_sum_to_one():
    env = SyntheticEnv()
    et = env.sample_task(1)
    phi, mask = state_features(env, et, env.reset(et))
    p = ToyPolicy().probs(phi, mask)
    assert p.sum() == pytest.approx(1.0)
    assert np.all(p[mask == 0] == 0)


def _fd_grad(f, theta, h=1e-5):
    g = np.zeros_like(theta)
    for i in range(len(theta)):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


@pytest.mark.parametrize("kl_coef", [0.001, 0.0, 0.5])
def test_gradient_matches_finite_differences(kl_coef):
    batch, policy = _batch()
    cfg = GrpoConfig(kl_coef=kl_coef)
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(20):
        theta = policy.theta + rng.normal(0, 0.1, size=len(FEATURES))
        analytic = toy_policy_gradient(ToyPolicy(theta), batch, cfg)
        numeric = _fd_grad(lambda th: toy_objective(th, batch, cfg), theta)
        rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)
        worst = max(worst, rel)
    assert worst < 1e-4


def test_zero_advantages_leave_only_the_kl_term():
    batch, policy = _batch()
    batch.adv[:] = 0.0
    theta = policy.theta + 0.05
    assert np.all(toy_policy_gradient(ToyPolicy(theta), batch, GrpoConfig(kl_coef=0.0)) == 0.0)
    assert np.any(toy_policy_gradient(ToyPolicy(theta), batch, GrpoConfig(kl_coef=0.1)) != 0.0)


def test_kl_gradient_vanishes_at_the_old_policy():
    batch, policy = _batch()
    g0 = toy_policy_gradient(policy, batch, GrpoConfig(kl_coef=0.0))
    g1 = toy_policy_gradient(policy, batch, GrpoConfig(kl_coef=1.0))
    np.testing.assert_allclose(g0, g1, atol=1e-12)


def test_checkpoint_round_trip(tmp_path):
    p = ToyPolicy(np.random.default_rng(0).normal(size=len(FEATURES)))
    path = tmp_path / "policy.txt"
    p.save(path)
    assert path.read_text().splitlines()[0] == CHECKPOINT_HEADER
    assert np.array_equal(ToyPolicy.load(path).theta, p.theta)
    path.write_text("garbage\n")
    with pytest.raises(ValueError):
        ToyPolicy.load(path)


def test_reference_learning_rate_is_kept():
    assert REFERENCE_LEARNING_RATE == 1e-6
    assert GrpoConfig().kl_coef == 0.001 and GrpoConfig().epsilon == 0.2


# -- training ----------------------------------------------------------------------

def test_zero_learning_rate_keeps_policy_fixed():
    res = train_toy(config=GrpoConfig(iterations=12, learning_rate=0.0), seed=3)
    assert np.array_equal(res.policy.theta, ToyPolicy.initial_theta())
    returns = [row["mean_return"] for row in res.curve]
    first, second = np.mean(returns[:6]), np.mean(returns[6:])
    assert abs(first - second) < 0.4   # same policy, only sampling noise


def test_training_is_deterministic_per_seed():
    cfg = GrpoConfig(iterations=5)
    assert train_toy(config=cfg, seed=4).curve == train_toy(config=cfg, seed=4).curve


def test_seed_zero_improvement_is_pinned(trained_default):
    c = trained_default.curve
    assert len(c) == 201 and c[-1]["iteration"] == 200
    assert c[0]["mean_return"] == pytest.approx(2.653125, abs=1e-9)
    assert c[-1]["mean_return"] == pytest.approx(4.259375, abs=1e-9)
    assert c[-1]["mean_return"] - c[0]["mean_return"] >= 0.5


def test_stop_reward_shortens_episodes(trained_default, trained_without_stop_reward):
    tail = lambda res: np.mean([row["mean_tau"] for row in res.curve[-41:]])  # noqa: E731
    assert tail(trained_without_stop_reward) > tail(trained_default)


def test_curve_csv(tmp_path, trained_default):
    path = tmp_path / "curve.csv"
    trained_default.write_curve(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "iteration,mean_return,mean_tau,mean_frames,accuracy"
    assert len(lines) == 202


def test_smoothed_windows():
    assert smoothed([1, 2, 3, 4, 5], 2) == [1.5, 3.5]
    assert smoothed([1], 2) == []


def test_env_config_is_used():
    env = SyntheticEnv(EnvConfig(max_rounds=2))
    et = env.sample_task(0)
    ep = rollout(env, et, ToyPolicy(), np.random.default_rng(0))
    assert ep.trajectory.tau <= 2
