import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bellman_calib.mdp import (
    DomainError,
    OverlapError,
    Policy,
    StateSpace,
    TabularMDP,
    TabularQ,
    Transition,
    TransitionDataset,
    bellman_target,
    bellman_targets,
    discounted_occupancy,
    population_pseudo_data,
    tabular_occupancy_ratio,
    tabular_q_solve,
    value_under_policy,
)

from conftest import random_mdp, random_policy


def const_q(values):
    values = np.asarray(values, dtype=float)
    return lambda a, s: values[np.asarray(a)] * np.ones(np.shape(s))


# -- value_under_policy / bellman_target -------------------------------------


def test_value_point_mass_policy_picks_action():
    q = TabularQ(np.array([[1.0, 5.0], [2.0, 7.0]]))
    pi = Policy.deterministic([1, 0], 2)
    assert value_under_policy(q, pi, 0) == 5.0
    assert value_under_policy(q, pi, 1) == 2.0


def test_value_uniform_average():
    pi = Policy.uniform(3, 2)
    assert value_under_policy(const_q([0.0, 2.0]), pi, 1) == pytest.approx(1.0)


def test_value_weighted_sum():
    pi = Policy(np.array([[0.75, 0.25]]))
    assert value_under_policy(const_q([0.0, 4.0]), pi, 0) == pytest.approx(1.0)


def test_value_vectorised_matches_scalar(rng):
    pi = random_policy(rng, 5, 3)
    q = TabularQ(rng.normal(size=(5, 3)))
    s = np.array([4, 0, 2, 2])
    assert np.allclose(value_under_policy(q, pi, s), [value_under_policy(q, pi, int(x)) for x in s])


def test_value_domain_error():
    with pytest.raises(DomainError):
        value_under_policy(const_q([1.0]), Policy.uniform(2, 1), 5)


@given(st.floats(-3, 3), st.floats(-3, 3))
@settings(max_examples=30, deadline=None)
def test_value_is_linear_in_q(alpha, beta):
    rng = np.random.default_rng(1)
    pi = random_policy(rng, 4, 2)
    q1, q2 = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    s = np.arange(4)
    lhs = value_under_policy(TabularQ(alpha * q1 + beta * q2), pi, s)
    rhs = alpha * value_under_policy(TabularQ(q1), pi, s) + beta * value_under_policy(TabularQ(q2), pi, s)
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_bellman_target_examples():
    pi = Policy.uniform(2, 2)
    t = Transition(0, 1, 1.0, 1)
    q = TabularQ(np.array([[0.0, 0.0], [2.0, 2.0]]))
    assert bellman_target(q, pi, t, 0.0) == 1.0
    assert bellman_target(TabularQ(np.zeros((2, 2))), pi, t, 0.9) == 1.0
    assert bellman_target(q, pi, t, 0.5) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        bellman_target(q, pi, t, 1.0)


def test_bellman_targets_vector_matches_scalar(rng):
    pi = random_policy(rng, 3, 2)
    q = TabularQ(rng.normal(size=(3, 2)))
    data = TransitionDataset([0, 1, 2], [1, 0, 1], [0.5, -1.0, 2.0], [2, 2, 0])
    vec = bellman_targets(q, pi, data, 0.6)
    assert np.allclose(vec, [bellman_target(q, pi, t, 0.6) for t in data])


# -- tabular Q ---------------------------------------------------------------


def test_q_solve_gamma_zero_is_reward(rng):
    mdp = random_mdp(rng, gamma=0.0)
    assert np.array_equal(tabular_q_solve(mdp, random_policy(rng, 4, 2)).table, mdp.reward_mean)


def test_q_solve_absorbing_state():
    mdp = TabularMDP(np.ones((1, 2, 1)), np.ones((1, 2)), np.ones(1), 0.9)
    q = tabular_q_solve(mdp, Policy(np.array([[0.3, 0.7]])))
    partial = sum(0.9**t for t in range(2000))
    assert np.allclose(q.table, 10.0, atol=1e-10)
    assert np.allclose(q.table, partial, atol=1e-10)


def test_q_solve_matches_truncated_sum():
    P = np.array([[[0.9, 0.1]], [[0.3, 0.7]]])
    mdp = TabularMDP(P, np.array([[1.0], [-0.5]]), np.array([0.5, 0.5]), 0.8)
    pi = Policy.uniform(2, 1)
    q = tabular_q_solve(mdp, pi).table[:, 0]
    for s in range(2):
        d = np.eye(2)[s]
        total = 0.0
        for t in range(201):
            total += 0.8**t * d @ mdp.reward_mean[:, 0]
            d = d @ P[:, 0, :]
        assert q[s] == pytest.approx(total, abs=1e-6)


def test_q_solve_bellman_residual(rng):
    mdp = random_mdp(rng, M=6, A=3, gamma=0.95)
    pi = random_policy(rng, 6, 3)
    q = tabular_q_solve(mdp, pi).table
    v = (pi.probs * q).sum(axis=1)
    resid = q - (mdp.reward_mean + 0.95 * mdp.transition @ v)
    assert np.max(np.abs(resid)) <= 1e-10


def test_mdp_validation():
    with pytest.raises(ValueError):
        TabularMDP(np.full((2, 1, 2), 0.6), np.zeros((2, 1)), np.array([0.5, 0.5]), 0.5)
    with pytest.raises(ValueError):
        TabularMDP(np.full((2, 1, 2), 0.5), np.zeros((2, 1)), np.array([0.5, 0.5]), 1.0)
    with pytest.raises(ValueError):
        Policy(np.array([[0.5, 0.6]]))


# -- occupancy ratio ---------------------------------------------------------


def test_ratio_gamma_zero_is_propensity_ratio(rng):
    mdp = random_mdp(rng, gamma=0.0)
    pi, b = random_policy(rng, 4, 2), random_policy(rng, 4, 2)
    d = tabular_occupancy_ratio(mdp, pi, b)
    assert np.allclose(d, pi.probs / b.probs, atol=1e-12)


def test_ratio_stationary_start_constant():
    rng = np.random.default_rng(3)
    mdp = random_mdp(rng, M=5, A=2, gamma=0.85)
    b = random_policy(rng, 5, 2)
    Pb = np.einsum("sa,sat->st", b.probs, mdp.transition)
    vals, vecs = np.linalg.eig(Pb.T)
    stat = np.real(vecs[:, np.argmin(np.abs(vals - 1))])
    stat /= stat.sum()
    stationary = TabularMDP(mdp.transition, mdp.reward_mean, stat, 0.85)
    d = tabular_occupancy_ratio(stationary, b, b, truncation=np.inf)
    assert np.allclose(d, 1 / (1 - 0.85), atol=1e-8)


def test_ratio_total_discounted_mass(rng):
    mdp = random_mdp(rng, M=5, A=3, gamma=0.9)
    pi, b = random_policy(rng, 5, 3), random_policy(rng, 5, 3)
    d = tabular_occupancy_ratio(mdp, pi, b, truncation=np.inf)
    mass = mdp.init_dist[:, None] * b.probs
    assert float(np.sum(d * mass)) == pytest.approx(1 / (1 - 0.9), abs=1e-8)


def test_ratio_time_invariant_covariate():
    # a covariate X that never changes: E[d | X] = 1/(1 - gamma) for pi = b
    M = 4
    X = np.array([0, 0, 1, 1])
    rng = np.random.default_rng(5)
    P = np.zeros((M, 1, M))
    for s in range(M):
        block = np.flatnonzero(X == X[s])
        P[s, 0, block] = rng.dirichlet(np.ones(block.size))
    mdp = TabularMDP(P, np.zeros((M, 1)), np.full(M, 0.25), 0.6)
    pi = Policy.uniform(M, 1)
    d = tabular_occupancy_ratio(mdp, pi, pi, truncation=np.inf)[:, 0]
    for x in (0, 1):
        sel = X == x
        cond = np.dot(mdp.init_dist[sel], d[sel]) / mdp.init_dist[sel].sum()
        assert cond == pytest.approx(1 / (1 - 0.6), abs=1e-10)


def test_ratio_overlap_violation():
    mdp = TabularMDP(np.full((2, 2, 2), 0.5), np.zeros((2, 2)), np.array([0.5, 0.5]), 0.5)
    pi = Policy.deterministic([1, 1], 2)
    b = Policy.deterministic([0, 0], 2)
    with pytest.raises(OverlapError):
        tabular_occupancy_ratio(mdp, pi, b, truncation=np.inf)
    clipped = tabular_occupancy_ratio(mdp, pi, b, truncation=50.0)
    assert clipped.max() == 50.0


def test_occupancy_sums_to_horizon(rng):
    mdp = random_mdp(rng, gamma=0.75)
    pi = random_policy(rng, 4, 2)
    start = mdp.init_dist[:, None] * pi.probs
    rho = discounted_occupancy(mdp, pi, start)
    assert rho.sum() == pytest.approx(4.0, abs=1e-10)


# -- dataset -----------------------------------------------------------------


def test_dataset_validation():
    with pytest.raises(ValueError):
        TransitionDataset([], [], [], [])
    with pytest.raises(ValueError):
        TransitionDataset([0], [0], [np.nan], [0])
    with pytest.raises(DomainError):
        TransitionDataset([0], [2], [1.0], [0], n_actions=2)
    with pytest.raises(DomainError):
        TransitionDataset([0], [0], [1.0], [3], states=StateSpace(("x",), ((0,), (1,))))


def test_dataset_order_stable_and_weights():
    data = TransitionDataset([2, 0, 1], [0, 1, 0], [1.0, 2.0, 3.0], [0, 1, 2], weights=[1.0, 1.0, 2.0])
    assert [t.s0 for t in data] == [2, 0, 1]
    assert data.w.sum() == pytest.approx(3.0)
    assert data.mean(np.array([1.0, 1.0, 4.0])) == pytest.approx(2.5)


def test_csv_roundtrip(tmp_path, rng):
    states = StateSpace(("x", "y"), ((0, 0), (0, 1), (1, 0)))
    data = TransitionDataset(rng.integers(0, 3, 20), rng.integers(0, 2, 20), rng.normal(size=20),
                             rng.integers(0, 3, 20), None, states, 2)
    path = data.to_csv(tmp_path / "d.csv")
    back = TransitionDataset.from_csv(path)
    assert (tmp_path / "d.alphabet.json").exists()
    assert np.array_equal(back.s0, data.s0) and np.array_equal(back.y0, data.y0)
    assert back.states.fields == ("x", "y") and back.n_actions == 2
    assert open(path).readline().strip() == "s0,a0,y0,s1"


def test_pseudo_data_reproduces_population_moments(rng):
    mdp = random_mdp(rng, gamma=0.5)
    b = random_policy(rng, 4, 2)
    data = population_pseudo_data(mdp, b)
    assert data.weights.sum() == pytest.approx(1.0)
    expected = np.sum(mdp.init_dist[:, None] * b.probs * mdp.reward_mean)
    assert data.mean(data.y0) == pytest.approx(expected, abs=1e-14)
