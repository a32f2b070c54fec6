import numpy as np
import pytest

from bellman_calib.mdp import Policy, TabularMDP


def random_mdp(rng, M=4, A=2, gamma=0.7, sparse=False):
    P = rng.random((M, A, M))
    if sparse:
        P[P < 0.5] = 0.0
        P[np.arange(M), :, np.arange(M)] += 0.1
    P /= P.sum(axis=2, keepdims=True)
    r = rng.normal(size=(M, A))
    mu = rng.random(M) + 0.1
    return TabularMDP(P, r, mu / mu.sum(), gamma)


def random_policy(rng, M, A):
    p = rng.random((M, A)) + 0.05
    return Policy(p / p.sum(axis=1, keepdims=True))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
