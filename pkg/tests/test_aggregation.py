import itertools

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from aggrollout.aggregation import (
    AggregateMdp,
    BasePolicyBundle,
    FeatureSpace,
    RepresentativeBeliefSet,
    _coo_to_csr,
    _exact_rows,
    base_policy_and_cost,
    belief_grid_2,
    build_aggregate_mdp,
    disaggregate,
    enumerate_representatives,
    epsilon_and_bound,
    feature_belief,
    oracle_cost_function,
    partition_diameters,
    phi_map,
    solve_aggregation,
    value_iteration,
)
from aggrollout.errors import CapacityExceeded, NonConvergence
from aggrollout.pomdp import DenseModel
from conftest import random_dense

GROUPED = FeatureSpace.from_partition([0, 0, 1])


def test_feature_space_validation():
    with pytest.raises(ValueError):
        FeatureSpace.from_partition([0, 2])
    fs = FeatureSpace.identity(3)
    assert fs.is_identity and fs.m_f == 3
    np.testing.assert_array_equal(fs.aggregation, np.eye(3))
    np.testing.assert_allclose(GROUPED.disaggregation, [[0.5, 0.5, 0], [0, 0, 1]])


def test_feature_belief_examples():
    np.testing.assert_allclose(feature_belief([0.2, 0.3, 0.5], GROUPED), [0.5, 0.5])
    np.testing.assert_allclose(feature_belief([0.2, 0.3, 0.5], FeatureSpace.identity(3)), [0.2, 0.3, 0.5])
    np.testing.assert_allclose(feature_belief([0, 1, 0], GROUPED), [1, 0])


def test_disaggregate_examples():
    np.testing.assert_allclose(disaggregate([1, 0], GROUPED), [0.5, 0.5, 0])
    np.testing.assert_allclose(disaggregate([0.5, 0.5], GROUPED), [0.25, 0.25, 0.5])
    np.testing.assert_allclose(disaggregate([0.1, 0.9], FeatureSpace.identity(2)), [0.1, 0.9])


def test_representatives():
    reps = enumerate_representatives(2, 1)
    np.testing.assert_array_equal(reps.points, [[0, 1], [1, 0]])
    assert len(enumerate_representatives(4, 4)) == 35
    assert len(enumerate_representatives(8, 3)) == 120
    with pytest.raises(CapacityExceeded):
        RepresentativeBeliefSet(8, 20, capacity=1000)


def test_phi_examples():
    fs, reps = FeatureSpace.identity(2), enumerate_representatives(2, 2)
    assert np.allclose(reps.points[phi_map([0.3, 0.7], fs, reps)], [0.5, 0.5])
    assert phi_map([0.25, 0.75], fs, reps) == 0
    assert phi_map([0.5, 0.5], fs, reps) == 1


@given(st.integers(2, 4), st.integers(1, 6))
def test_phi_idempotent_on_representatives(n, rho):
    fs, reps = FeatureSpace.identity(n), enumerate_representatives(n, rho)
    idx = phi_map(disaggregate(reps.points, fs), fs, reps)
    np.testing.assert_array_equal(idx, np.arange(len(reps)))


def test_single_state_aggregate():
    m = DenseModel([[[1.0]], [[1.0]]], [[[1.0]], [[1.0]]], [[[3.0]], [[2.0]]], 0.9)
    mdp = build_aggregate_mdp(m, FeatureSpace.identity(1), enumerate_representatives(1, 1))
    assert mdp.num_states == 1
    for P in mdp.transitions:
        assert P.toarray().tolist() == [[1.0]]
    np.testing.assert_allclose(mdp.stage_cost, [[3.0, 2.0]])


def _ref_exact_rows(prior, O, phi, reps):
    W = prior[:, None, :] * O.T[None, :, :]
    p = W.sum(axis=2)
    k, z = np.nonzero(p > 0)
    dest = reps.nearest((W[k, z] / p[k, z, None]) @ phi)
    return _coo_to_csr([k], [dest], [p[k, z]], len(prior))


@given(st.integers(0, 2**32 - 1), st.integers(2, 4), st.integers(1, 7))
def test_exact_kernel_matches_numpy_reference(seed, n, rho):
    rng = np.random.default_rng(seed)
    m = random_dense(rng, n, 2, 3, sparse=True)
    fs = FeatureSpace.identity(n) if n < 4 else FeatureSpace.from_partition([0, 0, 1, 2])
    reps = enumerate_representatives(fs.m_f, rho)
    B = disaggregate(reps.points, fs)
    for u in range(2):
        prior = B @ m.transition_matrix(u)
        got = _exact_rows(prior, m.observation_matrix(u), fs.aggregation, reps, 50)
        want = _ref_exact_rows(prior, m.observation_matrix(u), fs.aggregation, reps)
        assert abs(got - want).max() < 1e-12


@pytest.mark.parametrize("rho", [1, 4, 10])
def test_rows_are_stochastic(k1, rho):
    mdp = build_aggregate_mdp(k1, FeatureSpace.identity(2), enumerate_representatives(2, rho))
    assert mdp.mode == "exact"
    assert mdp.row_sum_error() < 1e-9


def test_exact_vs_sampled_on_recovery(k1):
    fs, reps = FeatureSpace.identity(2), enumerate_representatives(2, 5)
    ex = build_aggregate_mdp(k1, fs, reps, mode="exact")
    sa = build_aggregate_mdp(k1, fs, reps, mode="sampled", n_sim=100_000, seed=0)
    assert sa.row_sum_error() < 1e-3
    for Pe, Ps in zip(ex.transitions, sa.transitions):
        assert abs(Pe - Ps).max() < 0.01


def test_construction_budget(k1):
    with pytest.raises(CapacityExceeded):
        build_aggregate_mdp(k1, FeatureSpace.identity(2), enumerate_representatives(2, 10), budget=10)


def _mdp(P, G, alpha):
    reps = enumerate_representatives(1, 1) if len(G) == 1 else None
    return AggregateMdp(reps, [sp.csr_matrix(Pu) for Pu in P], np.asarray(G, float), alpha)


def test_vi_geometric_series():
    mdp = _mdp([[[1.0]]], [[1.0]], 0.5)
    r, pi = value_iteration(mdp, threshold=1e-12)
    assert r[0] == pytest.approx(2.0, abs=1e-11)
    r, _ = value_iteration(_mdp([[[1.0]]], [[1.0]], 0.5), threshold=0.1)
    assert abs(r[0] - 2.0) <= 0.1


def test_vi_matches_policy_enumeration():
    rng = np.random.default_rng(0)
    S, U, alpha, thr = 5, 2, 0.9, 1e-6
    P = rng.random((U, S, S))
    P /= P.sum(axis=2, keepdims=True)
    G = rng.uniform(0, 1, (S, U))
    r, pi = value_iteration(_mdp(P, G, alpha), threshold=thr)
    best = np.full(S, np.inf)
    for pol in itertools.product(range(U), repeat=S):
        Ppi = P[list(pol), np.arange(S)]
        J = np.linalg.solve(np.eye(S) - alpha * Ppi, G[np.arange(S), list(pol)])
        best = np.minimum(best, J)
    np.testing.assert_allclose(r, best, atol=thr / (1 - alpha))


def test_vi_ties_take_smallest_control():
    mdp = _mdp([[[1.0]], [[1.0]]], [[1.0, 1.0]], 0.5)
    _, pi = value_iteration(mdp, threshold=1e-9)
    assert pi[0] == 0


def test_vi_nonconvergence():
    with pytest.raises(NonConvergence):
        value_iteration(_mdp([[[1.0]]], [[1.0]], 0.99), threshold=1e-12, max_iter=5)


def test_vi_monotone_for_nonnegative_costs():
    rng = np.random.default_rng(2)
    P = rng.random((2, 6, 6))
    P /= P.sum(axis=2, keepdims=True)
    hist = []
    value_iteration(_mdp(P, rng.random((6, 2)), 0.95), threshold=1e-3, callback=lambda it, r: hist.append(r.copy()))
    assert all(np.all(b >= a - 1e-12) for a, b in zip(hist, hist[1:]))


def test_bellman_residual_within_threshold(k1):
    b = solve_aggregation(k1, FeatureSpace.identity(2), 10, threshold=1e-3)
    assert b.mdp.residual <= 1e-3


def test_bundle_is_piecewise_constant(k1):
    b = solve_aggregation(k1, FeatureSpace.identity(2), 100, threshold=1e-4)
    grid = belief_grid_2(1001)
    costs = b.cost(grid)
    assert len(np.unique(costs)) <= 101
    rep = b.reps.points[37]
    assert base_policy_and_cost(b, rep) == (int(b.mdp.pi_star[37]), float(b.mdp.r_star[37]))
    assert base_policy_and_cost(b, [0.4951, 0.5049]) == base_policy_and_cost(b, [0.5049, 0.4951])


def test_bundle_roundtrip(tmp_path, k2):
    fs = FeatureSpace.identity(4)
    b = solve_aggregation(k2, fs, 3, threshold=1e-3)
    b.save(tmp_path / "b.npz")
    c = BasePolicyBundle.load(tmp_path / "b.npz")
    np.testing.assert_array_equal(b.mdp.r_star, c.mdp.r_star)
    np.testing.assert_array_equal(b.mdp.pi_star, c.mdp.pi_star)
    for P, Q in zip(b.mdp.transitions, c.mdp.transitions):
        assert (P != Q).nnz == 0
    probes = np.random.default_rng(0).dirichlet(np.ones(4), 50)
    np.testing.assert_array_equal(b.control(probes), c.control(probes))


def test_epsilon_with_constant_oracle(k1):
    b = solve_aggregation(k1, FeatureSpace.identity(2), 4)
    rep = epsilon_and_bound(b, lambda B: np.full(len(B), 3.0), belief_grid_2(101))
    assert rep.epsilon == 0.0 and rep.bound == 0.0


def test_grid_cell_diameter(k1):
    for rho in (1, 3, 10, 40):
        b = solve_aggregation(k1, FeatureSpace.identity(2), rho)
        diam = partition_diameters(b, belief_grid_2(2001))
        assert max(diam.values()) <= 2 * 2 / rho + 1e-12


def test_single_state_oracle_is_geometric():
    m = DenseModel([[[1.0]]], [[[1.0]]], [[[1.5]]], 0.9)
    oc = oracle_cost_function(m, rho_fine=3, threshold=1e-8)
    assert oc(np.array([[1.0]]))[0] == pytest.approx(1.5 / 0.1, abs=1e-6)
