"""Riesz representers and the weighting functions ``T(alpha)`` they induce.

Three routes are provided:

* a linear class ``alpha = beta' phi`` with the inner maximisation of the
  min-max objective replaced by its closed form, a ridge regression of
  ``V(phi)(S1)`` on ``phi(A0, S0)``;
* the dimension-reduced class ``f o q*`` for a finitely-valued calibrated Q,
  solved as an L-state Markov chain on the levels of ``q*``;
* exact tabular weights from the occupancy ratio.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg

from .functionals import FunctionalSpec
from .mdp import Policy, TransitionDataset
from .regression import RegressorSpec, fit_least_squares

DEFAULT_RIDGE_PER_RECORD = 1e-6


class RepresenterError(ArithmeticError):
    """The representer system is numerically singular."""


@dataclass(frozen=True, eq=False)
class FeatureMap:
    dim: int
    phi: Callable[[np.ndarray, np.ndarray], np.ndarray]
    provenance: str = "explicit"
    leaf_values: np.ndarray | None = None
    intercept: float = 0.0

    def __call__(self, a, s) -> np.ndarray:
        return self.phi(a, s)


@dataclass(eq=False)
class RieszWeights:
    """Estimated representer ``alpha`` and weighting function ``T(alpha)``."""

    weight: Callable[[np.ndarray, np.ndarray], np.ndarray]
    alpha: Callable[[np.ndarray, np.ndarray], np.ndarray] | None
    coef: np.ndarray | None = None
    kind: str = "linear"
    diagnostics: dict = field(default_factory=dict)


def one_hot_cells(n_states: int, n_actions: int) -> FeatureMap:
    """Indicator of each (s, a) cell."""
    dim = n_states * n_actions

    def phi(a, s):
        a = np.asarray(a, dtype=np.int64).reshape(-1)
        s = np.asarray(s, dtype=np.int64).reshape(-1)
        out = np.zeros((s.shape[0], dim))
        out[np.arange(s.shape[0]), s * n_actions + a] = 1.0
        return out

    return FeatureMap(dim, phi, "explicit")


def policy_average(f, pi: Policy, s: np.ndarray) -> np.ndarray:
    """``sum_a pi(a|s) f(a, s)`` for vector- or matrix-valued ``f``."""
    total = 0.0
    for a in pi.support:
        p = pi.probs[s, a]
        if np.any(p > 0):
            vals = np.asarray(f(np.full(s.shape[0], a), s), dtype=float)
            total = total + (p[:, None] * vals if vals.ndim == 2 else p * vals)
    return total


def _solve(G: np.ndarray, c: np.ndarray, what: str) -> np.ndarray:
    try:
        cond = np.linalg.cond(G)
    except np.linalg.LinAlgError:
        cond = np.inf
    if not np.isfinite(cond) or cond > 1e14:
        raise RepresenterError(f"{what} is singular (condition number {cond:.3g}); use a ridge penalty > 0")
    return scipy.linalg.solve(G, c, assume_a="sym")


def estimate_representer_linear(
    data: TransitionDataset,
    pi: Policy,
    functional: FunctionalSpec,
    features: FeatureMap,
    gamma: float,
    lam: float | None = None,
) -> RieszWeights:
    """Representer in the span of ``features`` by a single m x m solve.

    Minimises ``mean{T(beta'phi)^2} - 2 mean{m(beta'phi)}`` where ``T`` uses a
    ridge second-stage regression of ``V(phi)(S1)`` on ``phi(A0, S0)``.
    ``lam`` defaults to ``1e-6 * n``.
    """
    lam = DEFAULT_RIDGE_PER_RECORD * data.n if lam is None else float(lam)
    if lam < 0:
        raise ValueError("ridge penalty must be >= 0")
    w = data.w
    n = w.sum()
    Phi = np.asarray(features(data.a0, data.s0), dtype=float)
    m_dim = Phi.shape[1]
    if gamma > 0:
        Phi1 = policy_average(features, pi, data.s1)
        gram = Phi.T @ (w[:, None] * Phi) + lam * np.eye(m_dim)
        proj = _solve(gram, Phi.T @ (w[:, None] * Phi1), "second-stage Gram matrix")
    else:
        proj = np.zeros((m_dim, m_dim))
    transform = np.eye(m_dim) - gamma * proj
    Psi = Phi @ transform
    c = w @ np.asarray(functional(data.s0, data.a0, features), dtype=float) / n
    G = Psi.T @ (w[:, None] * Psi) / n + (lam / n) * np.eye(m_dim)
    beta = _solve(G, c, "representer Gram matrix")

    def alpha(a, s):
        return np.asarray(features(a, s)) @ beta

    def weight(a, s):
        return np.asarray(features(a, s)) @ (transform @ beta)

    return RieszWeights(weight, alpha, beta, "linear",
                        {"dim": m_dim, "lam": lam, "condition_number": float(np.linalg.cond(G))})


def second_stage_regression(
    data: TransitionDataset,
    pi: Policy,
    alpha,
    features,
    spec: RegressorSpec,
    gamma: float,
):
    """``T(alpha)(a, s) = alpha(a, s) - gamma * E_n[V(alpha)(S1) | A0=a, S0=s]``.

    The conditional mean is a least-squares fit of ``V(alpha)(S1)`` on
    ``features(A0, S0)`` with the given backend.
    """
    if gamma == 0:
        return lambda a, s: np.asarray(alpha(a, s), dtype=float)
    target = policy_average(alpha, pi, data.s1)
    reg = fit_least_squares(spec, features(data.a0, data.s0), target, data.w)

    def t_alpha(a, s):
        return np.asarray(alpha(a, s), dtype=float) - gamma * reg.predict(features(a, s))

    return t_alpha


class _LevelIndex:
    """Maps Q values to the index of the matching sample level."""

    def __init__(self, levels: np.ndarray):
        self.levels = levels

    def __call__(self, values) -> np.ndarray:
        v = np.asarray(values, dtype=float)
        idx = np.clip(np.searchsorted(self.levels, v), 0, self.levels.shape[0] - 1)
        left = np.clip(idx - 1, 0, None)
        closer_left = np.abs(self.levels[left] - v) < np.abs(self.levels[idx] - v)
        idx = np.where(closer_left, left, idx)
        if np.any(self.levels[idx] != v):
            warnings.warn("Q value without sample mass merged into nearest level", RuntimeWarning, stacklevel=3)
        return idx


def estimate_representer_dimreduced(
    data: TransitionDataset,
    pi: Policy,
    functional: FunctionalSpec,
    qstar,
    gamma: float,
) -> RieszWeights:
    """Representer of the form ``f o q*`` for a finitely-valued ``q*``.

    With level masses ``p``, level transition matrix ``P`` and
    ``M = I - gamma P``, the first-order condition ``M' diag(p) M beta = c`` is
    solved directly; the weighting function on level ``l`` is ``(M beta)_l``.
    """
    w = data.w
    n = w.sum()
    v0 = np.asarray(qstar(data.a0, data.s0), dtype=float)
    levels = np.unique(v0[w > 0])
    L = levels.shape[0]
    lvl = _LevelIndex(levels)
    b0 = lvl(v0)
    mass = np.bincount(b0, weights=w, minlength=L) / n

    P = np.zeros((L, L))
    if gamma > 0:
        for a in pi.support:
            p = pi.probs[data.s1, a]
            if np.any(p > 0):
                b1 = lvl(qstar(np.full(data.n, a), data.s1))
                np.add.at(P, (b0, b1), w * p)
        P /= (mass * n)[:, None]
    M = np.eye(L) - gamma * P

    def indicators(a, s):
        out = np.zeros((np.shape(s)[0], L))
        out[np.arange(out.shape[0]), lvl(qstar(a, s))] = 1.0
        return out

    c = w @ np.asarray(functional(data.s0, data.a0, indicators), dtype=float) / n
    try:
        u = scipy.linalg.solve(M.T, c) / mass
        beta = scipy.linalg.solve(M, u)
    except np.linalg.LinAlgError as exc:
        raise RepresenterError(f"level system singular: {exc}") from exc

    def alpha(a, s):
        return beta[lvl(qstar(a, s))]

    def weight(a, s):
        return u[lvl(qstar(a, s))]

    return RieszWeights(weight, alpha, beta, "dimreduced",
                        {"levels": levels, "weights_per_level": u, "level_mass": mass,
                         "level_transition": P})


def tree_leaf_features(data: TransitionDataset | None, base_model) -> FeatureMap:
    """One-hot encoding of the leaf reached in every tree of a boosted model.

    ``base_model`` is a regressor-backed Q-function (or anything with
    ``regressor`` and ``feature_map`` attributes) fit with ``boosted-trees``.
    """
    reg = getattr(base_model, "regressor", None)
    feature_map = getattr(base_model, "feature_map", None)
    if reg is None or feature_map is None or reg.spec.backend != "boosted-trees":
        raise ValueError("tree_leaf_features needs a boosted-trees regressor")
    model = reg.model
    trees = [est[0].tree_ for est in model.estimators_]
    leaf_ids = [np.flatnonzero(t.children_left == -1) for t in trees]
    offsets = np.cumsum([0] + [ids.shape[0] for ids in leaf_ids])
    lookup = []
    for ids, t in zip(leaf_ids, trees):
        col = np.full(t.node_count, -1, dtype=np.int64)
        col[ids] = np.arange(ids.shape[0])
        lookup.append(col)
    dim = int(offsets[-1])
    leaf_values = np.concatenate([model.learning_rate * t.value[ids, 0, 0] for ids, t in zip(leaf_ids, trees)])
    intercept = float(np.ravel(model.init_.constant_)[0])

    def phi(a, s):
        X = feature_map(np.asarray(a), np.asarray(s))
        nodes = model.apply(X).astype(np.int64)
        out = np.zeros((X.shape[0], dim))
        rows = np.arange(X.shape[0])
        for k in range(len(trees)):
            out[rows, offsets[k] + lookup[k][nodes[:, k]]] = 1.0
        return out

    return FeatureMap(dim, phi, "tree-leaves", leaf_values, intercept)


def tabular_weights(table: np.ndarray, alpha_table: np.ndarray | None = None) -> RieszWeights:
    """Wrap an (M, A) table of weights, e.g. an occupancy ratio."""
    table = np.asarray(table, dtype=float)

    def weight(a, s):
        return table[np.asarray(s), np.asarray(a)]

    alpha = None
    if alpha_table is not None:
        at = np.asarray(alpha_table, dtype=float)

        def alpha(a, s):
            return at[np.asarray(s), np.asarray(a)]

    return RieszWeights(weight, alpha, None, "tabular", {"max_abs_weight": float(np.max(np.abs(table)))})
