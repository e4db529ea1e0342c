import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aggrollout.errors import ZeroLikelihood
from aggrollout.pomdp import (
    DenseModel,
    all_posteriors,
    belief_update_exact,
    discounted_sum,
    load_model,
    obs_prob_given_belief,
    observation_distribution,
    point_belief,
    save_model,
    simulate_policy,
    stage_cost_expected,
    uniform_belief,
    validate_belief,
)
from conftest import random_dense


def single_state(cost=1.0, discount=0.5):
    return DenseModel([[[1.0]]], [[[1.0]]], [[[cost]]], discount)


def test_validate_belief_rejects_bad_input():
    with pytest.raises(ValueError):
        validate_belief([0.5, 0.6])
    with pytest.raises(ValueError):
        validate_belief([1.2, -0.2])
    with pytest.raises(ValueError):
        validate_belief([0.5, 0.5], n=3)
    np.testing.assert_array_equal(validate_belief([0.25, 0.75]), [0.25, 0.75])


def test_dense_model_rejects_non_stochastic_rows():
    with pytest.raises(ValueError):
        DenseModel([[[0.5, 0.4], [0.0, 1.0]]], [[[1.0], [1.0]]], np.zeros((1, 2, 2)), 0.9)
    with pytest.raises(ValueError):
        DenseModel([[[1.0]]], [[[1.0]]], [[[1.0]]], 1.0)


def test_single_state_update_is_trivial():
    m = single_state()
    np.testing.assert_array_equal(belief_update_exact(m, [1.0], 0, 0), [1.0])
    assert obs_prob_given_belief(m, [1.0], 0, 0) == 1.0


def test_recovery_update_hand_computation(k1):
    # prior after no-op from (0.5, 0.5) is (0.4, 0.6); z = 0 is far likelier when safe
    post = belief_update_exact(k1, [0.5, 0.5], 0, 0)
    lik_s, lik_c = 0.4204381193405085, 0.0909090909090911
    expected = 0.6 * lik_c / (0.6 * lik_c + 0.4 * lik_s)
    assert post[1] == pytest.approx(expected, abs=1e-9)
    assert post[1] == pytest.approx(0.2449, abs=1e-4)


def test_impossible_observation_raises():
    T = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    O = np.array([[[1.0, 0.0], [1.0, 0.0]]])
    m = DenseModel(T, O, np.zeros((1, 2, 2)), 0.9)
    with pytest.raises(ZeroLikelihood):
        belief_update_exact(m, [0.5, 0.5], 0, 1)


def test_stage_cost_examples(k1):
    assert stage_cost_expected(k1, [1.0, 0.0], 1) == pytest.approx(1.0)
    assert stage_cost_expected(k1, [0.0, 1.0], 0) == pytest.approx(2.0)
    assert stage_cost_expected(k1, [0.5, 0.5], 0) == pytest.approx(1.0)


def test_observation_probability_example(k1):
    p = obs_prob_given_belief(k1, [1.0, 0.0], 0, 0)
    assert p == pytest.approx(0.8 * 0.4204381193405085 + 0.2 * 0.0909090909090911, abs=1e-9)
    assert p == pytest.approx(0.35454, abs=1e-5)


def test_uniform_belief_observation_is_average_of_marginals(make_dense):
    m = make_dense(np.random.default_rng(3), n=4, U=2, Z=3)
    for u in range(2):
        direct = observation_distribution(m, uniform_belief(4), u)
        marg = np.mean([observation_distribution(m, point_belief(4, i), u) for i in range(4)], axis=0)
        np.testing.assert_allclose(direct, marg, atol=1e-12)


@given(st.integers(0, 2**32 - 1), st.integers(1, 5), st.integers(1, 3), st.integers(1, 4))
def test_update_matches_joint_enumeration(seed, n, U, Z):
    rng = np.random.default_rng(seed)
    m = random_dense(rng, n, U, Z, sparse=True)
    b = rng.dirichlet(np.ones(n))
    u = int(rng.integers(U))
    total = sum(obs_prob_given_belief(m, b, u, z) for z in range(Z))
    assert total == pytest.approx(1.0, abs=1e-8)
    for z in range(Z):
        joint = np.zeros(n)
        for i, j in itertools.product(range(n), range(n)):
            joint[j] += b[i] * m.T[u, i, j] * m.O[u, j, z]
        if joint.sum() <= 0:
            with pytest.raises(ZeroLikelihood):
                belief_update_exact(m, b, u, z)
            continue
        post = belief_update_exact(m, b, u, z)
        np.testing.assert_allclose(post, joint / joint.sum(), atol=1e-10)
        assert np.all(post >= 0) and abs(post.sum() - 1) <= 1e-9


def test_all_posteriors_agrees_with_single_updates(make_dense):
    m = make_dense(np.random.default_rng(5), n=3, U=2, Z=4)
    b = np.array([0.2, 0.3, 0.5])
    p, B = all_posteriors(m, b, 1)
    for z in range(4):
        assert p[z] == pytest.approx(obs_prob_given_belief(m, b, 1, z))
        np.testing.assert_allclose(B[z], belief_update_exact(m, b, 1, z))


def test_sampler_frequencies_match_tables(make_dense):
    m = make_dense(np.random.default_rng(8), n=3, U=1, Z=2)
    rng = np.random.default_rng(0)
    N = 20000
    draws = [m.sample(1, 0, rng) for _ in range(N)]
    js = np.bincount([d[0] for d in draws], minlength=3) / N
    np.testing.assert_allclose(js, m.T[0, 1], atol=0.02)
    z_given_0 = [d[1] for d in draws if d[0] == 0]
    assert np.mean(np.array(z_given_0) == 0) == pytest.approx(m.O[0, 0, 0], abs=0.03)


def test_simulate_single_step_single_state():
    traj = simulate_policy(single_state(), lambda b: 0, [1.0], 1, seed=0)
    assert traj.discounted_cost == 1.0
    assert len(traj) == 1


def test_always_recover_cost_is_geometric(k1):
    # starting safe, recovery keeps the replica safe and costs 1 every step
    H = 300
    traj = simulate_policy(k1, lambda b: 1, [1.0, 0.0], H, seed=4)
    alpha = k1.discount
    assert traj.discounted_cost == pytest.approx((1 - alpha**H) / (1 - alpha), rel=1e-12)
    assert traj.truncation_bound == pytest.approx(alpha**H * 2.0 / (1 - alpha))


def test_simulation_is_deterministic_given_seed(k1):
    pol = lambda b: int(b[1] > 0.5)
    a = simulate_policy(k1, pol, [0.5, 0.5], 60, seed=11)
    b = simulate_policy(k1, pol, [0.5, 0.5], 60, seed=11)
    assert [(s.control, s.observation, s.cost) for s in a.steps] == [(s.control, s.observation, s.cost) for s in b.steps]
    assert a.discounted_cost == b.discounted_cost


def test_trajectory_cost_matches_recomputation(k1):
    traj = simulate_policy(k1, lambda b: 0, [1.0, 0.0], 40, seed=2)
    assert traj.discounted_cost == pytest.approx(discounted_sum([s.cost for s in traj.steps], k1.discount), abs=1e-9)


def test_json_roundtrip(tmp_path, k2, make_dense):
    m = make_dense(np.random.default_rng(1), n=3, U=2, Z=2)
    save_model(m, tmp_path / "m.json")
    m2 = load_model(tmp_path / "m.json")
    np.testing.assert_array_equal(m.T, m2.T)
    np.testing.assert_array_equal(m.O, m2.O)
    np.testing.assert_array_equal(m.G, m2.G)
    save_model(k2, tmp_path / "k2.json")
    m3 = load_model(tmp_path / "k2.json")
    for u in range(4):
        np.testing.assert_allclose(m3.transition_matrix(u), k2.transition_matrix(u))
