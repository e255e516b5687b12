import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robust_irl.baselines import mlt_irl
from robust_irl.em import (EmOptions, GibbsOptions, exact_estep, gibbs_estep,
                           log_evidence, log_likelihood_table, mstep, obs_given_traj, posterior, robust_irl,
                           traj_prior)
from robust_irl.errors import CapacityError, ConfigurationError, DegenerateEvidenceError, PreconditionError
from robust_irl.fixtures import (chain_fixture, curve_observations, noise_free_model, noise_free_sequence,
                                 two_state_fixture)
from robust_irl.maxent import (Trajectory, empirical_feature_expectation, feature_count,
                               model_feature_expectation, solve)
from robust_irl.mdp import boltzmann_policy, learned_policy_ile, reward_table
from robust_irl.observation import ObsKind
from robust_irl.world import simulate_expert

UNIFORM_PI = np.full((2, 2), 0.5)


def every_trajectory(hm):
    n_s, n_a = hm.mdp.n_states, hm.mdp.n_actions
    steps = hm.mdp.horizon + 1
    for states in itertools.product(range(n_s), repeat=steps):
        for actions in itertools.product(range(n_a), repeat=steps):
            yield Trajectory(states, actions)


def prior_by_hand(traj, hm, pi):
    p = hm.mdp.start[traj.states[0]]
    for t, (s, a) in enumerate(traj.pairs):
        p *= pi[s, a]
        if t + 1 < len(traj):
            p *= hm.mdp.transition[s, a, traj.states[t + 1]]
    return p


def step_likelihoods(omega, hm):
    return [np.exp(hm.obs.step_log_vector(o, seen)) for o, seen in zip(omega.epochs, omega.sightings)]


def likelihood_by_hand(steps, traj):
    p = 1.0
    for t, (s, a) in enumerate(traj.pairs):
        p *= steps[t][s, a]
    return p


def brute_force_posterior(omega, hm, pi):
    trajs = list(every_trajectory(hm))
    steps = step_likelihoods(omega, hm)
    joint = np.array([prior_by_hand(t, hm, pi) * likelihood_by_hand(steps, t) for t in trajs])
    return trajs, joint / joint.sum()


def policy(hm, theta, beta=1.0):
    return boltzmann_policy(hm.mdp, reward_table(theta, hm.feats), beta)


def uniform_model(hm):
    return hm.with_obs(hm.obs.replace(kind=ObsKind.VISION, view_region=frozenset()))


def test_prior_examples():
    hm = two_state_fixture(horizon=2)
    traj = Trajectory([0, 1, 1], [1, 0, 1])
    # 0.6 * pi(0,1) * T(0,1,1) * pi(1,0) * T(1,0,1) * pi(1,1)
    expected = 0.6 * 0.5 * 0.7 * 0.5 * 0.9 * 0.5
    assert traj_prior(traj, hm, UNIFORM_PI) == pytest.approx(expected, rel=1e-12)

    chain = chain_fixture(horizon=2)
    impossible = Trajectory([0, 2, 2], [1, 1, 1])
    assert traj_prior(impossible, chain, np.full((3, 3), 1 / 3)) == 0.0


def test_prior_of_unique_deterministic_trajectory():
    hm = chain_fixture(horizon=2)
    t = hm.mdp.transition.copy()
    t[:, :2] = 0.0
    t[[0, 1, 2], 0, [0, 0, 1]] = 1.0
    t[[0, 1, 2], 1, [1, 2, 2]] = 1.0
    det = hm.__class__(hm.mdp.__class__(hm.mdp.states, hm.mdp.actions, t, hm.mdp.start, 2), hm.feats, hm.obs)
    pi = np.zeros((3, 3))
    pi[:, 1] = 1.0
    assert traj_prior(Trajectory([0, 1, 2], [1, 1, 1]), det, pi) == 1.0


def test_obs_given_traj_examples():
    hm = two_state_fixture(horizon=2)
    flat = uniform_model(hm)
    omega = curve_observations(Trajectory([0, 1, 1], [0, 1, 0]), hm, 0.1, seed=1)
    for traj in itertools.islice(every_trajectory(hm), 10):
        assert obs_given_traj(omega, traj, flat) == pytest.approx(0.25 ** 3)

    truth = Trajectory([0, 1, 1], [0, 1, 0])
    delta = hm.with_obs(noise_free_model(hm.obs))
    clean = noise_free_sequence(truth)
    best = max(every_trajectory(hm), key=lambda t: obs_given_traj(clean, t, delta))
    assert best == truth

    two = two_state_fixture(horizon=1)
    seq = curve_observations(Trajectory([1, 0], [1, 1]), two, 0.2, seed=4)
    table = np.exp(log_likelihood_table(seq, two.obs))
    assert obs_given_traj(seq, Trajectory([1, 0], [0, 1]), two) == pytest.approx(table[0, 1, 0] * table[1, 0, 1])
    with pytest.raises(ConfigurationError):
        obs_given_traj(seq, Trajectory([1, 0, 0], [0, 1, 1]), two)


def test_posterior_matches_brute_force_bayes():
    hm = two_state_fixture(horizon=2, sigma=0.3)
    pi = policy(hm, [0.4, -0.8])
    omega = curve_observations(Trajectory([0, 1, 1], [1, 0, 0]), hm, 0.3, seed=7)
    trajs, oracle = brute_force_posterior(omega, hm, pi)
    ours = np.array([posterior(t, omega, hm, pi) for t in trajs])
    np.testing.assert_allclose(ours, oracle, atol=1e-9)
    assert ours.sum() == pytest.approx(1.0, abs=1e-9)


def test_posterior_special_cases():
    hm = two_state_fixture(horizon=2)
    pi = policy(hm, [0.2, 0.1])
    omega = curve_observations(Trajectory([0, 0, 1], [0, 1, 1]), hm, 0.1, seed=0)
    flat = uniform_model(hm)
    for traj in itertools.islice(every_trajectory(hm), 12):
        assert posterior(traj, omega, flat, pi) == pytest.approx(traj_prior(traj, hm, pi), abs=1e-12)

    truth = Trajectory([1, 0, 0], [1, 0, 1])
    delta = hm.with_obs(noise_free_model(hm.obs))
    assert posterior(truth, noise_free_sequence(truth), delta, pi) == pytest.approx(1.0)


def test_degenerate_evidence():
    hm = chain_fixture(horizon=2)
    delta = hm.with_obs(noise_free_model(hm.obs))
    # starts in state 2, which the start distribution rules out
    omega = noise_free_sequence(Trajectory([2, 2, 2], [2, 2, 2]))
    pi = np.full((3, 3), 1 / 3)
    with pytest.raises(DegenerateEvidenceError):
        posterior(Trajectory([0, 0, 0], [0, 0, 0]), omega, delta, pi)
    with pytest.raises(DegenerateEvidenceError) as err:
        exact_estep([noise_free_sequence(Trajectory([0, 0, 0], [2, 2, 2])), omega], delta, pi)
    assert err.value.omega_index == 1


def test_log_evidence_matches_enumeration():
    hm = chain_fixture(horizon=3, sigma=0.2)
    pi = policy(hm, [0.5, -0.5])
    omega = curve_observations(Trajectory([0, 1, 2, 2], [1, 1, 2, 0]), hm, 0.2, seed=3)
    steps = step_likelihoods(omega, hm)
    total = sum(prior_by_hand(t, hm, pi) * likelihood_by_hand(steps, t) for t in every_trajectory(hm))
    assert log_evidence(omega, hm, pi) == pytest.approx(math.log(total), abs=1e-10)


def test_exact_estep_matches_hand_sum():
    hm = two_state_fixture(horizon=2, sigma=0.2)
    pi = policy(hm, [0.3, 0.3])
    omegas = [curve_observations(Trajectory([0, 1, 0], [1, 1, 0]), hm, 0.2, seed=s) for s in range(3)]
    oracle = np.zeros(2)
    for omega in omegas:
        trajs, post = brute_force_posterior(omega, hm, pi)
        assert len(trajs) == 64
        oracle += sum(p * feature_count(t, hm.feats) for t, p in zip(trajs, post)) / len(omegas)
    np.testing.assert_allclose(exact_estep(omegas, hm, pi).phi, oracle, atol=1e-12)


def test_exact_estep_delta_and_uniform():
    hm = two_state_fixture(horizon=3)
    pi = policy(hm, [1.0, -0.2])
    truths = [simulate_expert(hm, pi, 3, seed) for seed in range(4)]
    delta = hm.with_obs(noise_free_model(hm.obs))
    phi = exact_estep([noise_free_sequence(t) for t in truths], delta, pi).phi
    assert np.array_equal(phi, empirical_feature_expectation(truths, hm.feats))

    flat = uniform_model(hm)
    omegas = [curve_observations(t, hm, 0.1, seed=0) for t in truths]
    prior = sum(traj_prior(t, hm, pi) * feature_count(t, hm.feats) for t in every_trajectory(hm))
    np.testing.assert_allclose(exact_estep(omegas, flat, pi).phi, prior, atol=1e-12)


def test_exact_estep_errors():
    hm = chain_fixture(horizon=6)
    omega = curve_observations(Trajectory([0] * 7, [2] * 7), hm, 0.1, seed=0)
    with pytest.raises(CapacityError, match="Gibbs"):
        exact_estep([omega], hm, np.full((3, 3), 1 / 3), cap=1000)
    with pytest.raises(PreconditionError):
        exact_estep([], hm, np.full((3, 3), 1 / 3))


def test_gibbs_delta_model_never_leaves_truth():
    hm = chain_fixture(horizon=4)
    pi = np.full((3, 3), 1 / 3)
    truth = Trajectory([0, 1, 2, 2, 1], [1, 1, 2, 0, 2])
    delta = hm.with_obs(noise_free_model(hm.obs))
    for span in (1, 2, 0):
        result = gibbs_estep([noise_free_sequence(truth)], delta, pi, GibbsOptions(burn_in=50, span=span))
        np.testing.assert_array_equal(result.phi, feature_count(truth, hm.feats))


@pytest.mark.parametrize("span", [1, 2, 0])
@pytest.mark.parametrize("make", [lambda: two_state_fixture(horizon=2, sigma=0.3),
                                  lambda: two_state_fixture(horizon=4, sigma=0.5),
                                  lambda: chain_fixture(horizon=4, sigma=0.3)])
def test_gibbs_matches_exact(make, span):
    hm = make()
    pi = policy(hm, [0.5, -0.3])
    truths = [simulate_expert(hm, pi, hm.mdp.horizon, seed) for seed in range(3)]
    omegas = [curve_observations(t, hm, hm.obs.sigma, seed=i) for i, t in enumerate(truths)]
    exact = exact_estep(omegas, hm, pi).phi
    for seed in range(2):
        sampled = gibbs_estep(omegas, hm, pi, GibbsOptions(seed=seed, span=span))
        assert sampled.converged
        assert np.max(np.abs(sampled.phi - exact)) < 0.05


def test_gibbs_is_deterministic_and_seeded():
    hm = two_state_fixture(horizon=3, sigma=0.3)
    omega = curve_observations(Trajectory([0, 1, 1, 0], [1, 0, 1, 1]), hm, 0.3, seed=2)
    opts = GibbsOptions(seed=5, burn_in=100, block_size=50)
    a = gibbs_estep([omega], hm, UNIFORM_PI, opts)
    b = gibbs_estep([omega], hm, UNIFORM_PI, opts)
    c = gibbs_estep([omega], hm, UNIFORM_PI, GibbsOptions(seed=6, burn_in=100, block_size=50))
    assert np.array_equal(a.phi, b.phi)
    assert not np.array_equal(a.phi, c.phi)


def test_gibbs_options_validation():
    with pytest.raises(ConfigurationError):
        GibbsOptions(epsilon=0.0)
    with pytest.raises(ConfigurationError):
        GibbsOptions(thin=0)


def test_gibbs_reports_sweep_cap():
    hm = two_state_fixture(horizon=3, sigma=0.3)
    omega = curve_observations(Trajectory([0, 1, 1, 0], [1, 0, 1, 1]), hm, 0.3, seed=2)
    result = gibbs_estep([omega], hm, UNIFORM_PI, GibbsOptions(epsilon=1e-9, burn_in=10, block_size=20,
                                                               max_sweeps=500, span=1))
    assert not result.converged
    assert result.sweeps <= 500


def test_mstep_examples():
    hm = two_state_fixture(horizon=3)
    pi = policy(hm, [0.8, -0.5])
    truths = [simulate_expert(hm, pi, 3, seed) for seed in range(5)]
    phi = empirical_feature_expectation(truths, hm.feats)
    np.testing.assert_array_equal(mstep(phi, hm).theta, solve(phi, hm.mdp, hm.feats).theta)

    at = model_feature_expectation(hm.mdp, [0.2, 0.4], hm.feats)
    assert mstep(at, hm, theta0=[0.2, 0.4]).iterations == 0

    omega = curve_observations(truths[0], hm, 0.1, seed=0)
    sol = mstep(exact_estep([omega], hm, pi), hm)
    assert sol.grad_norm <= 1e-4


def test_robust_irl_reduces_to_maxent_with_delta_observations():
    hm = two_state_fixture(horizon=3)
    pi = policy(hm, [1.0, -1.0], beta=5.0)
    truths = [simulate_expert(hm, pi, 3, seed) for seed in range(6)]
    delta = hm.with_obs(noise_free_model(hm.obs))
    omegas = [noise_free_sequence(t) for t in truths]
    plain = solve(empirical_feature_expectation(truths, hm.feats), hm.mdp, hm.feats)
    for estep in ("exact", "gibbs"):
        result = robust_irl(omegas, delta, EmOptions(estep=estep, gibbs=GibbsOptions(burn_in=50)))
        assert result.trace.converged
        np.testing.assert_allclose(result.model_expectation, plain.model_expectation, atol=1e-3)
    baseline = mlt_irl(omegas, delta)
    np.testing.assert_allclose(baseline.solution.model_expectation, plain.model_expectation, atol=1e-6)


def test_robust_irl_uniform_model_learns_the_prior():
    hm = two_state_fixture(horizon=2)
    flat = uniform_model(hm)
    omegas = [curve_observations(Trajectory([0, 1, 0], [0, 0, 1]), hm, 0.1, seed=s) for s in range(3)]
    result = robust_irl(omegas, flat, EmOptions(beta=1.0))
    assert result.trace.converged
    assert len(result.trace) > 1
    # the last E-step ran under the policy of the previous iterate
    pi_before = policy(flat, result.trace.records[-2].theta)
    prior = sum(traj_prior(t, hm, pi_before) * feature_count(t, hm.feats) for t in every_trajectory(hm))
    np.testing.assert_allclose(result.trace.records[-1].phi, prior, atol=1e-9)


def test_robust_beats_most_likely_trajectory_at_moderate_noise():
    # curves shrunk tenfold so that a noise of 0.05 blurs neighbouring pairs
    hm = two_state_fixture(horizon=4, sigma=0.05)
    hm = hm.with_obs(hm.obs.replace(predicted=hm.obs.predicted * 0.1))
    theta_true = np.array([0.3, -0.5])
    pi = policy(hm, theta_true, beta=5.0)
    gaps = []
    for seed in range(10):
        truths = [simulate_expert(hm, pi, 4, [seed, i]) for i in range(4)]
        omegas = [curve_observations(t, hm, 0.05, seed=[seed, i]) for i, t in enumerate(truths)]
        ours = robust_irl(omegas, hm, EmOptions(seed=seed, beta=1.0)).theta
        base = mlt_irl(omegas, hm).theta
        gaps.append(learned_policy_ile(hm.mdp, hm.feats, base, theta_true)
                    - learned_policy_ile(hm.mdp, hm.feats, ours, theta_true))
    assert np.mean(gaps) > 0


def test_em_log_likelihood_rarely_falls_with_exact_estep():
    hm = two_state_fixture(horizon=3, sigma=0.3)
    pi = policy(hm, [0.7, -0.6], beta=5.0)
    truths = [simulate_expert(hm, pi, 3, seed) for seed in range(4)]
    omegas = [curve_observations(t, hm, 0.3, seed=i) for i, t in enumerate(truths)]
    result = robust_irl(omegas, hm, EmOptions(estep="exact", beta=1.0))
    lls = [r.log_likelihood for r in result.trace.records]
    drops = sum(b < a - 1e-6 for a, b in zip(lls, lls[1:]))
    assert drops == result.trace.ll_decreases


def test_robust_irl_is_deterministic():
    hm = chain_fixture(horizon=4, sigma=0.3)
    pi = policy(hm, [0.5, 0.5])
    omegas = [curve_observations(simulate_expert(hm, pi, 4, s), hm, 0.3, seed=s) for s in range(3)]
    opts = EmOptions(seed=3, estep="gibbs", gibbs=GibbsOptions(seed=3, burn_in=50, span=0))
    a = robust_irl(omegas, hm, opts)
    b = robust_irl(omegas, hm, opts)
    assert np.array_equal(a.theta, b.theta)
    assert [r.phi.tolist() for r in a.trace.records] == [r.phi.tolist() for r in b.trace.records]


def test_robust_irl_needs_data():
    with pytest.raises(PreconditionError):
        robust_irl([], two_state_fixture())


def test_trace_csv(tmp_path):
    hm = two_state_fixture(horizon=2)
    omegas = [curve_observations(Trajectory([0, 1, 0], [0, 0, 1]), hm, 0.1, seed=0)]
    result = robust_irl(omegas, hm)
    path = tmp_path / "trace.csv"
    result.trace.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "iteration,theta_0,theta_1,phi_0,phi_1,dual_value,estep_method,converged"
    assert len(lines) == len(result.trace) + 1
    stamps = [r.timestamp for r in result.trace.records]
    assert stamps == sorted(stamps)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_posterior_normalizes(seed):
    rng = np.random.default_rng(seed)
    hm = two_state_fixture(horizon=2, sigma=float(rng.uniform(0.05, 1.0)))
    pi = rng.dirichlet(np.ones(2), size=2)
    truth = Trajectory(rng.integers(0, 2, 3), rng.integers(0, 2, 3))
    omega = curve_observations(truth, hm, hm.obs.sigma, seed=seed)
    total = sum(posterior(t, omega, hm, pi) for t in every_trajectory(hm))
    assert total == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_delta_estep_is_exact(seed):
    rng = np.random.default_rng(seed)
    hm = chain_fixture(horizon=3)
    pi = rng.dirichlet(np.ones(3), size=3)
    truths = [simulate_expert(hm, pi, 3, rng) for _ in range(3)]
    delta = hm.with_obs(noise_free_model(hm.obs))
    phi = exact_estep([noise_free_sequence(t) for t in truths], delta, pi).phi
    assert np.array_equal(phi, empirical_feature_expectation(truths, hm.feats))
