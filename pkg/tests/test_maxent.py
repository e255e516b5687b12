import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import null_space

from robust_irl.errors import CapacityError, ConfigurationError, PreconditionError
from robust_irl.fixtures import chain_fixture, two_state_fixture
from robust_irl.maxent import (ExpectationMethod, SolverOptions, Trajectory, dual_gradient, empirical_feature_expectation,
                               feature_count, log_partition, model_feature_expectation, solve, trajectory_prob)
from robust_irl.mdp import FeatureSet, Heading, Mdp, State
from robust_irl.world import build_world, load_world_config


def all_trajectories(mdp):
    """Every dynamics-feasible trajectory with its feature-free base weight (always 1)."""
    n_s, n_a = mdp.n_states, mdp.n_actions
    out = []
    for pairs in itertools.product(range(n_s * n_a), repeat=mdp.horizon + 1):
        s = [p // n_a for p in pairs]
        a = [p % n_a for p in pairs]
        if mdp.start[s[0]] <= 0:
            continue
        if all(mdp.transition[s[t], a[t], s[t + 1]] > 0 for t in range(mdp.horizon)):
            out.append(Trajectory(s, a))
    return out


def brute_force(mdp, feats, theta):
    trajs = all_trajectories(mdp)
    counts = np.array([feature_count(t, feats) for t in trajs])
    logw = counts @ theta
    p = np.exp(logw - logw.max())
    p /= p.sum()
    return trajs, counts, p


def random_instance(rng, horizon=2):
    n_s, n_a, k = 3, 2, 2
    t = rng.random((n_s, n_a, n_s)) * (rng.random((n_s, n_a, n_s)) < 0.5)
    t[..., 0] += 1e-2
    t /= t.sum(axis=2, keepdims=True)
    mdp = Mdp(tuple(State(s) for s in range(n_s)), ("x", "y"), t, rng.dirichlet(np.ones(n_s)), horizon)
    feats = FeatureSet((rng.random((n_s, n_a, k)) < 0.5).astype(float))
    return mdp, feats


seeds = st.integers(0, 2**32 - 1)


def test_feature_count_examples():
    empty = FeatureSet(np.zeros((2, 2, 0)))
    assert feature_count(Trajectory([0, 1], [0, 0]), empty).shape == (0,)
    only_first = FeatureSet(np.stack([np.ones((2, 2)), np.zeros((2, 2))], axis=2))
    np.testing.assert_array_equal(feature_count(Trajectory([0, 1, 0], [1, 0, 1]), only_first), [3, 0])


def test_drone_feature_count():
    world = build_world(load_world_config("drone"))
    row = world.cells[0][0]
    s = [world.state_index((row, c), Heading.E) for c in (1, 2, 3)]
    traj = Trajectory(s, [0, 0, 1])
    np.testing.assert_array_equal(feature_count(traj, world.feats), [2, 1])


def test_empirical_expectation_examples():
    feats = FeatureSet(np.array([[[1.0, 0.0], [0.0, 1.0]], [[0.0, 0.0], [0.0, 1.0]]]))
    a = Trajectory([0, 0, 0], [0, 0, 1])   # counts (2, 1)
    b = Trajectory([1, 1, 1], [0, 0, 1])   # counts (0, 1)
    np.testing.assert_array_equal(empirical_feature_expectation([a], feats), [2, 1])
    np.testing.assert_array_equal(empirical_feature_expectation([a, a], feats), [2, 1])
    np.testing.assert_array_equal(empirical_feature_expectation([a, b], feats), [1, 1])
    with pytest.raises(PreconditionError):
        empirical_feature_expectation([], feats)


def test_trajectory_prob_by_hand():
    # From state 0 the single action lands in 0 or 1 with equal odds: two trajectories.
    t = np.array([[[0.5, 0.5]], [[0.5, 0.5]]])
    mdp = Mdp((State(0), State(1)), ("go",), t, [1.0, 0.0], 1)
    feats = FeatureSet(np.array([[[0.0]], [[1.0]]]))
    theta = [np.log(2.0)]
    assert trajectory_prob(Trajectory([0, 1], [0, 0]), theta, mdp, feats) == pytest.approx(2 / 3)
    assert trajectory_prob(Trajectory([0, 0], [0, 0]), theta, mdp, feats) == pytest.approx(1 / 3)
    assert trajectory_prob(Trajectory([1, 1], [0, 0]), theta, mdp, feats) == 0.0


def test_trajectory_prob_zero_theta_and_singleton():
    mdp = two_state_fixture().mdp
    feats = two_state_fixture().feats
    trajs = all_trajectories(mdp)
    for traj in trajs[:5]:
        assert trajectory_prob(traj, [0.0, 0.0], mdp, feats) == pytest.approx(1 / len(trajs))
    single = Mdp((State(0),), ("a",), np.ones((1, 1, 1)), [1.0], 2)
    assert trajectory_prob(Trajectory([0, 0, 0], [0, 0, 0]), [3.0], single,
                           FeatureSet(np.ones((1, 1, 1)))) == pytest.approx(1.0)


def test_model_expectation_matches_brute_force():
    hm = two_state_fixture(horizon=2)
    theta = np.array([0.7, -0.4])
    _, counts, p = brute_force(hm.mdp, hm.feats, theta)
    oracle = p @ counts
    for method in ExpectationMethod:
        np.testing.assert_allclose(model_feature_expectation(hm.mdp, theta, hm.feats, method), oracle, atol=1e-10)


def test_model_expectation_simple_cases():
    hm = two_state_fixture(horizon=3)
    _, counts, _ = brute_force(hm.mdp, hm.feats, np.zeros(2))
    np.testing.assert_allclose(model_feature_expectation(hm.mdp, [0.0, 0.0], hm.feats), counts.mean(axis=0))
    const = FeatureSet(np.ones((2, 2, 1)))
    np.testing.assert_allclose(model_feature_expectation(hm.mdp, [1.3], const), [4.0])


def test_enumeration_cap():
    hm = chain_fixture(horizon=6)
    with pytest.raises(CapacityError, match="visitation"):
        model_feature_expectation(hm.mdp, [0.0, 0.0], hm.feats, "enumerate", cap=1000)


def test_gradient_examples():
    hm = two_state_fixture()
    theta = np.array([0.3, -0.2])
    phi = model_feature_expectation(hm.mdp, theta, hm.feats)
    np.testing.assert_allclose(dual_gradient(theta, phi, hm.mdp, hm.feats), 0.0, atol=1e-12)
    uniform = model_feature_expectation(hm.mdp, [0.0, 0.0], hm.feats)
    np.testing.assert_allclose(dual_gradient([0.0, 0.0], uniform, hm.mdp, hm.feats), 0.0, atol=1e-12)
    with pytest.raises(ConfigurationError):
        dual_gradient(theta, [1.0], hm.mdp, hm.feats)


def test_gradient_matches_finite_differences_at_fixed_theta():
    hm = two_state_fixture()
    theta = np.array([0.3, -0.2])
    h = 1e-5
    fd = [(log_partition(hm.mdp, theta + h * e, hm.feats) - log_partition(hm.mdp, theta - h * e, hm.feats)) / (2 * h)
          for e in np.eye(2)]
    model = model_feature_expectation(hm.mdp, theta, hm.feats)
    np.testing.assert_allclose(model, fd, rtol=1e-4)


def test_solve_uniform_target():
    hm = two_state_fixture()
    target = model_feature_expectation(hm.mdp, [0.0, 0.0], hm.feats)
    sol = solve(target, hm.mdp, hm.feats)
    assert sol.converged
    assert sol.grad_norm <= 1e-4
    np.testing.assert_allclose(sol.model_expectation, target, atol=1e-4)


def test_solve_recovers_expectation_at_known_theta():
    hm = two_state_fixture()
    target = model_feature_expectation(hm.mdp, [1.0, -1.0], hm.feats, "enumerate")
    sol = solve(target, hm.mdp, hm.feats)
    assert sol.converged
    np.testing.assert_allclose(model_feature_expectation(hm.mdp, sol.theta, hm.feats), target, atol=1e-4)


def test_solve_rejects_infeasible_target():
    hm = two_state_fixture(horizon=2)
    with pytest.raises(PreconditionError):
        solve([3.5, 0.0], hm.mdp, hm.feats)
    with pytest.raises(PreconditionError):
        solve([-0.1, 0.0], hm.mdp, hm.feats)


def test_solve_reports_iteration_cap():
    hm = two_state_fixture()
    target = model_feature_expectation(hm.mdp, [2.0, -2.0], hm.feats)
    sol = solve(target, hm.mdp, hm.feats, SolverOptions(max_iterations=2))
    assert not sol.converged
    assert sol.status.value == "iteration_cap"


def test_solve_fixed_point_returns_immediately():
    hm = two_state_fixture()
    first = solve(model_feature_expectation(hm.mdp, [0.5, 0.5], hm.feats), hm.mdp, hm.feats)
    again = solve(first.model_expectation, hm.mdp, hm.feats, theta0=first.theta)
    assert again.iterations == 0
    assert again.grad_norm <= 1e-4


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_probabilities_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    mdp, feats = random_instance(rng)
    theta = rng.normal(size=feats.k)
    total = sum(trajectory_prob(t, theta, mdp, feats) for t in all_trajectories(mdp))
    assert total == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_visitation_equals_enumeration(seed):
    rng = np.random.default_rng(seed)
    mdp, feats = random_instance(rng, horizon=int(rng.integers(1, 4)))
    theta = rng.normal(size=feats.k) * 2
    fast = model_feature_expectation(mdp, theta, feats, "visitation")
    slow = model_feature_expectation(mdp, theta, feats, "enumerate")
    np.testing.assert_allclose(fast, slow, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    mdp, feats = random_instance(rng)
    theta = rng.uniform(-2, 2, size=feats.k)
    h = 1e-5
    fd = np.array([(log_partition(mdp, theta + h * e, feats) - log_partition(mdp, theta - h * e, feats)) / (2 * h)
                   for e in np.eye(feats.k)])
    grad = dual_gradient(theta, np.zeros(feats.k), mdp, feats)
    np.testing.assert_allclose(grad, fd, rtol=1e-4, atol=1e-8)


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_solution_has_maximum_entropy(seed):
    rng = np.random.default_rng(seed)
    hm = two_state_fixture(horizon=2)
    target = model_feature_expectation(hm.mdp, rng.uniform(-1, 1, size=2), hm.feats)
    sol = solve(target, hm.mdp, hm.feats, SolverOptions(tolerance=1e-8))
    _, counts, p = brute_force(hm.mdp, hm.feats, sol.theta)

    def entropy(q):
        q = q[q > 0]
        return -np.sum(q * np.log(q))

    # moves that keep total mass and feature expectations fixed
    basis = null_space(np.vstack([counts.T, np.ones(len(p))]))
    for _ in range(5):
        d = basis @ rng.normal(size=basis.shape[1])
        step = 0.5 * np.min(p / np.maximum(np.abs(d), 1e-300))
        other = p + step * d
        assert np.all(other >= 0)
        assert entropy(p) >= entropy(other) - 1e-9


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_solve_is_scale_consistent(seed):
    rng = np.random.default_rng(seed)
    mdp, feats = random_instance(rng)
    target = model_feature_expectation(mdp, rng.uniform(-1, 1, size=feats.k), feats)
    sol = solve(target, mdp, feats)
    again = solve(sol.model_expectation, mdp, feats, theta0=sol.theta)
    assert again.grad_norm <= 1e-4
    assert again.iterations == 0
