"""Fitted Q-iteration over a pluggable regression backend."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .mdp import CrossFittedQ, Policy, StateSpace, TransitionDataset
from .regression import FittedRegressor, RegressorSpec, RowGroups, fit_least_squares

FeatureFn = Callable[[np.ndarray, np.ndarray], np.ndarray]

MAX_DEFAULT_ITERS = 200


def state_action_features(states: StateSpace) -> FeatureFn:
    """Features ``[a, *state_tuple]`` for each (a, s) pair."""
    codes = states.as_array().astype(np.float64)

    def phi(a, s):
        a = np.asarray(a, dtype=np.float64).reshape(-1)
        s = np.asarray(s, dtype=np.int64).reshape(-1)
        return np.column_stack([a, codes[s]])

    return phi


def cell_features(n_actions: int) -> FeatureFn:
    """Single integer feature identifying the (s, a) cell."""

    def phi(a, s):
        return (np.asarray(s, dtype=np.int64) * n_actions + np.asarray(a, dtype=np.int64)).astype(float)[:, None]

    return phi


def default_max_iters(gamma: float, tol: float) -> int:
    if gamma == 0.0:
        return 1
    return min(MAX_DEFAULT_ITERS, max(1, math.ceil(math.log(tol) / math.log(gamma))))


@dataclass(frozen=True)
class FQIConfig:
    gamma: float
    regressor: RegressorSpec
    feature_map: FeatureFn
    tol: float = 1e-6
    max_iters: int | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.tol <= 0:
            raise ValueError("tol must be > 0")
        if self.max_iters is not None and self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")

    @property
    def iterations(self) -> int:
        return self.max_iters if self.max_iters is not None else default_max_iters(self.gamma, self.tol)


@dataclass(frozen=True)
class FQIDiagnostics:
    iterations: int
    increments: tuple[float, ...]
    converged: bool

    @property
    def final_increment(self) -> float:
        return self.increments[-1] if self.increments else 0.0

    def to_json(self) -> dict:
        return {
            "iterations": self.iterations,
            "increments": list(self.increments),
            "converged": self.converged,
        }


@dataclass(eq=False)
class RegressorQ:
    """Q-function backed by a fitted regressor over a feature map."""

    regressor: FittedRegressor
    feature_map: FeatureFn
    diagnostics: FQIDiagnostics | None = None
    kind: str = field(default="regressor")

    def __call__(self, a, s) -> np.ndarray:
        s = np.asarray(s)
        a = np.broadcast_to(np.asarray(a), s.shape)
        return self.regressor.predict(self.feature_map(a, s))


class _NextStateFeatures:
    """Feature rows for every pi-supported action at each next state."""

    def __init__(self, data: TransitionDataset, pi: Policy, feature_map: FeatureFn):
        self.blocks = []
        for a in pi.support:
            p = pi.probs[data.s1, a]
            rows = np.flatnonzero(p > 0)
            if rows.size:
                X = RowGroups(feature_map(np.full(rows.size, a), data.s1[rows]))
                self.blocks.append((rows, p[rows], X))
        self.n = data.n

    def value(self, reg: FittedRegressor) -> np.ndarray:
        out = np.zeros(self.n)
        for rows, p, X in self.blocks:
            out[rows] += p * reg.predict_rows(X)
        return out


def fitted_q_iteration(data: TransitionDataset, pi: Policy, cfg: FQIConfig) -> RegressorQ:
    """Iteratively regress ``Y0 + gamma V^pi(q_k)(S1)`` on features of ``(A0, S0)``.

    Starts from ``q_0 = 0`` and stops once the empirical L2 change between
    successive iterates falls below ``cfg.tol`` or after ``cfg.iterations``.
    """
    w = data.w
    X0 = RowGroups(cfg.feature_map(data.a0, data.s0))
    nxt = _NextStateFeatures(data, pi, cfg.feature_map) if cfg.gamma > 0 else None

    prev = np.zeros(data.n)
    v_next = np.zeros(data.n)
    increments: list[float] = []
    reg = None
    converged = False
    for _ in range(cfg.iterations):
        targets = data.y0 + cfg.gamma * v_next
        reg = fit_least_squares(cfg.regressor, X0, targets, w)
        cur = reg.predict_rows(X0)
        increments.append(float(np.sqrt(np.dot(w, (cur - prev) ** 2) / w.sum())))
        prev = cur
        if nxt is None:
            converged = True
            break
        v_next = nxt.value(reg)
        if increments[-1] < cfg.tol:
            converged = True
            break
    diag = FQIDiagnostics(len(increments), tuple(increments), converged)
    return RegressorQ(reg, cfg.feature_map, diag)


def fold_ids(n: int, n_folds: int, rng: np.random.Generator) -> np.ndarray:
    """Balanced random fold assignment."""
    if n_folds < 1:
        raise ValueError("n_folds must be >= 1")
    if n_folds > n:
        raise ValueError("more folds than records")
    return rng.permutation(np.arange(n) % n_folds)


def cross_fit_fqi(
    data: TransitionDataset,
    pi: Policy,
    cfg: FQIConfig,
    n_folds: int = 5,
    seed: int = 0,
    folds: np.ndarray | None = None,
) -> CrossFittedQ:
    """FQI fit once per fold on the other folds; record ``i`` is scored by its own fold's model.

    With ``n_folds=1`` a single model is fit on all records.
    """
    if folds is None:
        folds = fold_ids(data.n, n_folds, np.random.default_rng(seed))
    folds = np.asarray(folds, dtype=np.int64)
    k = int(folds.max()) + 1
    if k == 1:
        return CrossFittedQ([fitted_q_iteration(data, pi, cfg)], folds)
    models = [fitted_q_iteration(data.subset(np.flatnonzero(folds != j)), pi, cfg) for j in range(k)]
    return CrossFittedQ(models, folds)
