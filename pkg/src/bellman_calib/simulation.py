"""Simulated long-term A/B test: data generator and exact ground truth.

Each unit has a treatment arm ``z`` and a baseline state ``s~ = (e, c, t, o)``
(engagement, churn risk, tenure, overlap), each in ``{0, 1, 2}``. The Markov
state is ``(z, s~)`` and the logged action is the arm itself, so the behavior
policy and the evaluation policy both keep a unit in its arm.
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit

from .functionals import FunctionalSpec, ab_test_ate
from .mdp import Policy, StateSpace, TabularMDP, TransitionDataset, tabular_q_solve

FIELDS = ("z", "e", "c", "t", "o")
N_ACTIONS = 2

# Initial multinomials as listed; the churn/tenure and overlap vectors do not
# sum to one and are normalised by their own sums.
RAW_INIT = {
    "e": (0.5, 0.3, 0.2),
    "c": (0.25, 0.25, 0.25),
    "t": (0.25, 0.25, 0.25),
    "o": (0.7, 0.3, 0.2),
}
INIT = {k: np.asarray(v) / np.sum(v) for k, v in RAW_INIT.items()}

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    z = (int(x) + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def rep_seed(seed: int, rep: int) -> int:
    """Seed of Monte Carlo repetition ``rep``: ``seed XOR splitmix64(rep)``."""
    return (int(seed) ^ splitmix64(rep)) & _MASK64


@dataclass(frozen=True)
class SimConfig:
    n: int
    gamma: float
    beta: float
    treat_prob: float = 0.25
    seed: int = 0

    def __post_init__(self) -> None:
        if int(self.n) != self.n or self.n < 1:
            raise ValueError("n must be a positive integer")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if not 0.0 < self.treat_prob < 1.0:
            raise ValueError("treat_prob must lie in (0, 1)")
        if not 0 <= int(self.seed) <= _MASK64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class SimTruth:
    true_ate: float
    psi1: float
    psi0: float
    q: np.ndarray

    def to_json(self) -> dict:
        return {"true_ate": self.true_ate, "psi1": self.psi1, "psi0": self.psi0}


def sim_state_space() -> StateSpace:
    return StateSpace(FIELDS, tuple(itertools.product(range(2), *(range(3),) * 4)))


_STATES = sim_state_space()
_CODES = _STATES.as_array()


def baseline_dist() -> np.ndarray:
    """Distribution of ``s~`` as an (3, 3, 3, 3) array over ``(e, c, t, o)``."""
    return np.einsum("i,j,k,l->ijkl", INIT["e"], INIT["c"], INIT["t"], INIT["o"])


def stay_policy(states: StateSpace | None = None) -> Policy:
    """Keep every unit in its own arm: ``a = z``."""
    states = _STATES if states is None else states
    return Policy.deterministic(states.as_array()[:, states.field_index("z")], N_ACTIONS)


def ate_functional(states: StateSpace | None = None) -> FunctionalSpec:
    return ab_test_ate(_STATES if states is None else states, "z")


def reward_mean(z, e, c, t, o) -> np.ndarray:
    return expit(-0.5 + (np.asarray(o) > 0) + np.asarray(t) / 2 + 0.3 * np.asarray(z)
                 + (np.asarray(e) > 0) / 2 - np.asarray(c) / 2)


def engagement_up_prob(z, c) -> np.ndarray:
    """``P(B0 = 1)``; ``B0 = 1`` moves engagement up by one."""
    base = 0.8 - np.asarray(c) / 5
    return np.where(np.asarray(z) == 1, np.minimum(0.1 + base, 1.0), base)


def churn_up_prob(z) -> np.ndarray:
    return np.where(np.asarray(z) == 1, 0.4, 0.6)


def _step_dist(level: int, p_up: float) -> np.ndarray:
    out = np.zeros(3)
    out[min(level + 1, 2)] += p_up
    out[max(level - 1, 0)] += 1 - p_up
    return out


def analytic_mdp(cfg: SimConfig) -> TabularMDP:
    """Closed-form transition tensor and mean reward over the 162 ``(z, s~)`` states.

    The action plays the role of ``Z`` in the update rules and becomes the next
    state's arm.
    """
    M = len(_STATES)
    P = np.zeros((M, N_ACTIONS, M))
    R = np.zeros((M, N_ACTIONS))
    nxt = np.zeros((2, 3, 3, 3, 3))
    for s, (_, e, c, t, o) in enumerate(_CODES):
        for a in range(N_ACTIONS):
            pe = _step_dist(e, float(engagement_up_prob(a, c)))
            pc = _step_dist(c, float(churn_up_prob(a)))
            pt = np.zeros(3)
            pt[min(t + 1, 2)] = 1.0
            po = np.zeros(3)
            if a == 1:
                po[min(o + 1, 2)] += cfg.beta
                po[0] += 1 - cfg.beta
            else:
                po[0] = 1.0
            nxt[:] = 0.0
            nxt[a] = np.einsum("i,j,k,l->ijkl", pe, pc, pt, po)
            P[s, a] = nxt.reshape(M)
            R[s, a] = reward_mean(a, e, c, t, o)
    P /= P.sum(axis=2, keepdims=True)
    arm = np.array([1 - cfg.treat_prob, cfg.treat_prob])
    init = (arm[:, None] * baseline_dist().reshape(1, -1)).reshape(M)
    return TabularMDP(P, R, init, cfg.gamma, _STATES)


def generate_dataset(cfg: SimConfig) -> TransitionDataset:
    """``n`` units, one observed transition each, under ``A_t = Z``."""
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n
    z = (rng.random(n) < cfg.treat_prob).astype(np.int64)
    e, c, t, o = (rng.choice(3, size=n, p=INIT[k]) for k in ("e", "c", "t", "o"))
    y = (rng.random(n) < reward_mean(z, e, c, t, o)).astype(float)
    b0 = rng.random(n) < engagement_up_prob(z, c)
    b1 = rng.random(n) < churn_up_prob(z)
    b2 = rng.random(n) < cfg.beta
    e1 = np.clip(e + 2 * b0 - 1, 0, 2)
    c1 = np.clip(c + 2 * b1 - 1, 0, 2)
    t1 = np.minimum(t + 1, 2)
    o1 = np.where((z == 1) & b2, np.minimum(o + 1, 2), 0)
    s0 = _encode(z, e, c, t, o)
    s1 = _encode(z, e1, c1, t1, o1)
    return TransitionDataset(s0, z, y, s1, None, _STATES, N_ACTIONS)


def _encode(z, e, c, t, o) -> np.ndarray:
    return (((z * 3 + e) * 3 + c) * 3 + t) * 3 + o


def oracle_truth(cfg: SimConfig) -> SimTruth:
    """``psi_z = sum_s~ init(s~) q(z, (z, s~))`` from the exact linear solve."""
    mdp = analytic_mdp(cfg)
    q = tabular_q_solve(mdp, stay_policy()).table
    base = baseline_dist().reshape(-1)
    psi = [float(base @ q[_encode(z, *_CODES[:81, 1:].T), z]) for z in (0, 1)]
    return SimTruth(psi[1] - psi[0], psi[1], psi[0], q)


def forward_truth(cfg: SimConfig, horizon: int = 300) -> tuple[float, float]:
    """``(psi1, psi0)`` as ``sum_{t <= horizon} gamma^t E[Y_t(z)]`` by pushing the state law forward."""
    mdp = analytic_mdp(cfg)
    base = baseline_dist().reshape(-1)
    out = []
    for z in (1, 0):
        P = mdp.transition[:, z, :]
        r = mdp.reward_mean[:, z]
        d = np.zeros(len(_STATES))
        d[_encode(z, *_CODES[:81, 1:].T)] = base
        total, disc = 0.0, 1.0
        for _ in range(horizon + 1):
            total += disc * float(d @ r)
            d = d @ P
            disc *= cfg.gamma
        out.append(total)
    return out[0], out[1]
