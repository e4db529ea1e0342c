import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aggrollout.pomdp import DenseModel, stage_cost_expected
from aggrollout.recovery import (
    RecoveryModel,
    RecoveryParams,
    ScenarioSwitch,
    SwitchedModels,
    apply_scenario_switch,
    betabin_pmf,
    bits,
    build_recovery_pomdp,
    index_of_bits,
    mixed_alert_shift,
    zone_feature_space,
)

SAFE_BARS = [
    0.4204381193405085, 0.22890519830761025, 0.14592706392110147, 0.09381025537785098,
    0.05784965748300809, 0.03262720682041655, 0.015497923239697894, 0.0049445755098083705,
]
COMPROMISED_BARS = [
    0.0909090909090911, 0.09497964721845345, 0.09997857601942456, 0.10636018725470703,
    0.1149839862213048, 0.12775998469033872, 0.15030586434157509, 0.21472266334510712,
]


def test_betabin_bars():
    np.testing.assert_allclose(betabin_pmf(7, 0.7, 3), SAFE_BARS, atol=5e-4)
    np.testing.assert_allclose(betabin_pmf(7, 1, 0.7), COMPROMISED_BARS, atol=5e-4)
    assert betabin_pmf(7, 0.7, 3)[0] == pytest.approx(0.4204, abs=1e-4)
    assert betabin_pmf(7, 1, 0.7)[7] == pytest.approx(0.2147, abs=1e-4)


@given(st.integers(0, 30), st.floats(0.05, 20), st.floats(0.05, 20))
def test_betabin_normalised(t, a, b):
    p = betabin_pmf(t, a, b)
    assert len(p) == t + 1 and np.all(p >= 0)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)


def test_betabin_rejects_bad_parameters():
    with pytest.raises(ValueError):
        betabin_pmf(7, 0.0, 1.0)


def test_bits_are_big_endian():
    np.testing.assert_array_equal(bits(2, 2), [1, 0])
    assert index_of_bits([1, 0, 0, 0]) == 8


def test_k1_dynamics(k1):
    assert k1.transition(0, 0, 1) == pytest.approx(0.2)
    assert k1.transition(1, 1, 0) == pytest.approx(1.0)
    assert k1.transition(1, 0, 1) == pytest.approx(1.0)


def test_k2_neighbour_coupling(k2):
    # state (safe, compromised) = index 1, no-op: replica 1 is hit with probability 0.4
    P = k2.transition_matrix(0)
    p_rep1 = P[1, 0b10] + P[1, 0b11]
    assert p_rep1 == pytest.approx(0.4)


def test_k2_stage_cost():
    m = RecoveryModel(RecoveryParams(K=2))
    # replica 1 compromised and left alone (2), replica 2 safe and recovered (1)
    assert m.stage_cost(0b10, 0b01) == pytest.approx(3.0)
    assert m.cost(0b10, 0b01, 0) == pytest.approx(3.0)


def test_stage_costs_k1(k1):
    assert stage_cost_expected(k1, [1, 0], 1) == 1.0
    assert stage_cost_expected(k1, [0, 1], 0) == 2.0
    assert stage_cost_expected(k1, [0, 1], 1) == -1.0


def test_literal_cost_variant():
    m = build_recovery_pomdp(RecoveryParams(K=1, compromised_recovery_cost=0.0))
    assert stage_cost_expected(m, [0, 1], 1) == 0.0


@pytest.mark.parametrize("K", [1, 2])
def test_dense_and_factored_agree(K):
    params = RecoveryParams(K=K)
    fac = RecoveryModel(params)
    dense = build_recovery_pomdp(params)
    assert isinstance(dense, DenseModel)
    for u in range(fac.num_controls):
        np.testing.assert_allclose(dense.transition_matrix(u), fac.transition_matrix(u), atol=1e-12)
        np.testing.assert_allclose(dense.observation_matrix(u), fac.observation_matrix(u), atol=1e-12)
        np.testing.assert_allclose(dense.expected_cost(u), fac.expected_cost(u), atol=1e-12)


def test_observations_factor_over_replicas():
    m = RecoveryModel(RecoveryParams(K=3))
    z = m.obs_index([3, 0, 7])
    lik = m.obs_likelihood(z, 0)
    j = 0b101
    assert lik[j] == pytest.approx(COMPROMISED_BARS[3] * SAFE_BARS[0] * COMPROMISED_BARS[7], rel=1e-3)
    np.testing.assert_array_equal(m.obs_digits(z), [3, 0, 7])


def test_factored_rows_stochastic():
    m = RecoveryModel(RecoveryParams(K=3))
    m.check()


def test_no_op_never_heals():
    m = RecoveryModel(RecoveryParams(K=3))
    P = m.transition_matrix(0)
    for i in range(8):
        for j in np.flatnonzero(P[i] > 0):
            assert (i & ~j) == 0


def test_sampled_observations_match_likelihood():
    m = RecoveryModel(RecoveryParams(K=2))
    rng = np.random.default_rng(0)
    zs = np.array([m.sample_observation(0b01, 0, rng) for _ in range(20000)])
    freq = np.bincount(zs, minlength=m.num_observations) / len(zs)
    np.testing.assert_allclose(freq, m.observation_matrix(0)[0b01], atol=0.01)


def test_params_validation():
    with pytest.raises(ValueError):
        RecoveryParams(K=2, adjacency=((1, 1), (1, 0)))
    with pytest.raises(ValueError):
        RecoveryParams(obs_safe=(0.5, 0.6))
    p = RecoveryParams.from_dict({"K": 2, "obs_safe": {"trials": 7, "a": 0.7, "b": 3}})
    assert p == RecoveryParams(K=2)
    assert RecoveryParams.from_dict(p.to_dict()) == p


def test_path_graph_reduces_coupling():
    line = RecoveryParams(K=3, adjacency=((0, 1, 0), (1, 0, 1), (0, 1, 0)))
    m = RecoveryModel(line)
    # replica 3 compromised; replica 1 is not its neighbour
    np.testing.assert_allclose(m.compromise_probs(0b001, 0), [0.2, 0.4, 1.0])


def test_scenario_switch():
    sw = ScenarioSwitch(200, mixed_alert_shift(RecoveryParams(K=1)))
    models = SwitchedModels(RecoveryParams(K=1), sw)
    assert apply_scenario_switch(models, sw, 199) is models.pre
    assert apply_scenario_switch(models, sw, 200) is models.post
    assert models.post.observation_matrix(0)[0, 0] < models.pre.observation_matrix(0)[0, 0]
    same = SwitchedModels(RecoveryParams(K=1), ScenarioSwitch(5))
    assert all(same.at(k) is same.pre for k in (0, 5, 100))
    with pytest.raises(ValueError):
        ScenarioSwitch(-1)


def test_zone_features():
    params = RecoveryParams(K=4)
    fs = zone_feature_space(params, [[0, 1], [2, 3]])
    assert fs.m_f == 4
    assert fs.state_to_feature[0b1000] == 0b10
    assert fs.state_to_feature[0b0011] == 0b01
    # feature (1, 0) covers the three states with a compromised replica in zone 1 only
    np.testing.assert_allclose(fs.disaggregation[0b10][[0b0100, 0b1000, 0b1100]], 1 / 3)
    single = zone_feature_space(params, [[0], [1], [2], [3]])
    assert single.is_identity
    with pytest.raises(ValueError):
        zone_feature_space(params, [[0, 1], [1, 2, 3]])
